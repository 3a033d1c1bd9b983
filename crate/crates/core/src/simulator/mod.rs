//! Synthetic build simulator: renders per-layer raw frame stacks from part
//! geometry together with the ground truth every extractor is checked against.

mod distortion;
mod path;
mod render;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use distortion::random_plate_distortion;
pub use path::{generate_scan_path, pixel_visit_times, PathSample, ScanParameters, ScanPath};
pub use render::{
    render_layer, GroundTruth, NoiseLevel, RecoatStreak, RenderSettings, SpatterEvent, SpatterSchedule,
    ThermalParameters,
};

use crate::config::GridSpec;
use crate::error::{Error, Result};
use crate::framestack::{LayerStack, DEFAULT_FPS};
use crate::geometry::{layer_mask, read_stl, voxelize_parts, LayerMask, VoxelMesh};
use crate::radiometry::CalibrationProfile;
use crate::spatial::{Homography, PixelGridFrame};

fn default_frames() -> usize {
    200
}
fn default_fps() -> f64 {
    DEFAULT_FPS
}
fn default_start() -> f64 {
    3.5
}
fn default_delta() -> [f64; 2] {
    [500.0, 750.0]
}
fn default_spatter_decay() -> f64 {
    0.3
}
fn default_clearance() -> f64 {
    8.0
}
fn default_lookahead() -> usize {
    8
}
fn default_separation() -> f64 {
    6.0
}
fn default_reach() -> usize {
    24
}

/// Randomly placed spatter plus explicitly listed events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatterSpec {
    #[serde(default)]
    pub per_layer: usize,
    /// Peak temperature rise range, °C.
    #[serde(default = "default_delta")]
    pub delta_c: [f64; 2],
    #[serde(default = "default_spatter_decay")]
    pub decay_s: f64,
    /// Minimum distance (px) from any pixel the laser reaches within
    /// `lookahead_frames` of the landing.
    #[serde(default = "default_clearance")]
    pub clearance_px: f64,
    #[serde(default = "default_lookahead")]
    pub lookahead_frames: usize,
    /// Minimum distance between landings of one layer, px.
    #[serde(default = "default_separation")]
    pub separation_px: f64,
    /// Landings stay within this many pixels of the part footprint.
    #[serde(default = "default_reach")]
    pub reach_px: usize,
    /// CSV rows `layer,emit_frame,x,y,delta_c,decay_s`.
    #[serde(default)]
    pub events: String,
}

impl Default for SpatterSpec {
    fn default() -> Self {
        SpatterSpec {
            per_layer: 0,
            delta_c: default_delta(),
            decay_s: default_spatter_decay(),
            clearance_px: default_clearance(),
            lookahead_frames: default_lookahead(),
            separation_px: default_separation(),
            reach_px: default_reach(),
            events: String::new(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct EventRow {
    layer: usize,
    emit_frame: usize,
    x: usize,
    y: usize,
    delta_c: f64,
    decay_s: f64,
}

/// Parses `layer,emit_frame,x,y,delta_c,decay_s` rows (no header; `#` comments).
pub fn parse_spatter_events(text: &str) -> Result<Vec<(usize, SpatterEvent)>> {
    let rows: String = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .flat_map(|l| [l, "\n"])
        .collect();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(rows.as_bytes());
    let mut out = Vec::new();
    for (n, row) in reader.deserialize::<EventRow>().enumerate() {
        let r = row.map_err(|e| Error::Config(format!("spatter event row {}: {e}", n + 1)))?;
        out.push((
            r.layer,
            SpatterEvent {
                emit_frame: r.emit_frame,
                pixel: (r.x, r.y),
                delta_c: r.delta_c,
                decay_s: r.decay_s,
            },
        ));
    }
    Ok(out)
}

pub fn format_spatter_events(events: &[(usize, SpatterEvent)]) -> String {
    let mut s = String::from("# layer,emit_frame,x,y,delta_c,decay_s\n");
    for (layer, e) in events {
        s.push_str(&format!(
            "{layer},{},{},{},{},{}\n",
            e.emit_frame, e.pixel.0, e.pixel.1, e.delta_c, e.decay_s
        ));
    }
    s
}

/// Simulation spec file contents. Paths are relative to the spec's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    #[serde(default)]
    pub seed: u64,
    /// Layers rendered; the part height when absent.
    pub layers: Option<usize>,
    #[serde(default = "default_frames")]
    pub frames_per_layer: usize,
    #[serde(default = "default_fps")]
    pub fps: f64,
    /// Laser start, in frame periods after the first frame.
    #[serde(default = "default_start")]
    pub laser_start_frames: f64,
    #[serde(default)]
    pub stl: Vec<PathBuf>,
    /// Noise standard deviation as a fraction of each layer's count range.
    pub noise_relative: Option<f64>,
    /// Absolute noise standard deviation, counts.
    pub noise_sigma_counts: Option<f64>,
    /// Corrected-to-raw pixel homography rows; identity when absent.
    pub homography: Option<[[f64; 3]; 3]>,
    #[serde(default)]
    pub overlap_jitter: f64,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub scan: ScanParameters,
    #[serde(default)]
    pub thermal: ThermalParameters,
    #[serde(default)]
    pub spatter: SpatterSpec,
    #[serde(default)]
    pub calibration: CalibrationProfile,
    #[serde(default)]
    pub recoat_streak: Vec<RecoatStreak>,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        SimulationSpec {
            seed: 0,
            layers: None,
            frames_per_layer: default_frames(),
            fps: default_fps(),
            laser_start_frames: default_start(),
            stl: Vec::new(),
            noise_relative: None,
            noise_sigma_counts: None,
            homography: None,
            overlap_jitter: 0.0,
            grid: GridSpec::default(),
            scan: ScanParameters::default(),
            thermal: ThermalParameters::default(),
            spatter: SpatterSpec::default(),
            calibration: CalibrationProfile::default(),
            recoat_streak: Vec::new(),
        }
    }
}

impl SimulationSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SimulationSpec = toml::from_str(text).map_err(|e| Error::Config(format!("simulation spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Parameter(m) => Error::Config(m),
            other => other,
        };
        if self.noise_relative.is_some() && self.noise_sigma_counts.is_some() {
            return Err(Error::Config("set noise_relative or noise_sigma_counts, not both".into()));
        }
        if self.frames_per_layer == 0 {
            return Err(Error::Config("frames_per_layer must be positive".into()));
        }
        self.scan.validate()?;
        self.grid.frame()?;
        self.calibration.validate().map_err(cfg)?;
        self.homography().map_err(cfg)?;
        self.render_settings().validate().map_err(cfg)?;
        let sp = &self.spatter;
        if !(sp.delta_c[0] > 0.0 && sp.delta_c[1] >= sp.delta_c[0] && sp.decay_s > 0.0) {
            return Err(Error::Config("spatter delta_c must be an increasing positive range and decay_s positive".into()));
        }
        parse_spatter_events(&sp.events)?;
        Ok(())
    }

    pub fn homography(&self) -> Result<Homography> {
        self.homography.map_or(Ok(Homography::identity()), Homography::from_rows)
    }

    pub fn noise(&self) -> NoiseLevel {
        match (self.noise_relative, self.noise_sigma_counts) {
            (Some(r), _) => NoiseLevel::Relative(r),
            (_, Some(c)) => NoiseLevel::Counts(c),
            _ => NoiseLevel::Counts(0.0),
        }
    }

    pub fn voxel_pitch(&self) -> [f64; 3] {
        [self.grid.pitch_um, self.grid.pitch_um, self.scan.layer_thickness]
    }

    fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            frames: self.frames_per_layer,
            fps: self.fps,
            laser_start_s: self.laser_start_frames / self.fps,
            thermal: self.thermal.clone(),
            homography: self.homography().unwrap_or_else(|_| Homography::identity()),
            noise: self.noise(),
            seed: self.seed,
            overlap_jitter: self.overlap_jitter,
            streaks: self.recoat_streak.clone(),
            keep_temperatures: false,
        }
    }
}

/// A simulation spec bound to its voxelized geometry.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub spec: SimulationSpec,
    pub voxels: VoxelMesh,
    pub grid: PixelGridFrame,
    explicit_events: Vec<(usize, SpatterEvent)>,
}

impl Simulation {
    /// Loads the spec and voxelizes its STL files.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec = SimulationSpec::from_toml(&text)
            .map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
                other => other,
            })?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        if spec.stl.is_empty() {
            return Err(Error::Config(format!("{}: no stl files listed", path.display())));
        }
        let mut parts = Vec::new();
        for p in &spec.stl {
            let full = if p.is_absolute() { p.clone() } else { dir.join(p) };
            let name = full.file_stem().map_or("part".into(), |s| s.to_string_lossy().into_owned());
            parts.push((name, read_stl(&full)?));
        }
        let voxels = voxelize_parts(&parts, spec.voxel_pitch(), None)?;
        Self::new(spec, voxels)
    }

    pub fn new(spec: SimulationSpec, voxels: VoxelMesh) -> Result<Self> {
        spec.validate()?;
        let grid = spec.grid.frame()?;
        let explicit_events = parse_spatter_events(&spec.spatter.events)?;
        Ok(Simulation {
            spec,
            voxels,
            grid,
            explicit_events,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.spec.layers.unwrap_or(self.voxels.dims()[2])
    }

    pub fn mask(&self, layer: usize) -> Result<LayerMask> {
        if layer < self.voxels.dims()[2] {
            layer_mask(&self.voxels, layer, &self.grid)
        } else {
            Ok(LayerMask::empty(layer, self.grid))
        }
    }

    pub fn render(&self, layer: usize) -> Result<(LayerStack, GroundTruth)> {
        self.render_with(layer, |_| {})
    }

    /// Renders a layer after letting the caller adjust the settings.
    pub fn render_with(&self, layer: usize, adjust: impl FnOnce(&mut RenderSettings)) -> Result<(LayerStack, GroundTruth)> {
        let mask = self.mask(layer)?;
        let path = generate_scan_path(&mask, &self.spec.scan, layer)?;
        let mut settings = self.spec.render_settings();
        adjust(&mut settings);
        let mut schedule = self.random_schedule(&mask, &path, &settings)?;
        schedule
            .events
            .extend(self.explicit_events.iter().filter(|(l, _)| *l == layer).map(|(_, e)| *e));
        render_layer(&mask, &path, &schedule, &settings, &self.spec.calibration)
    }

    fn random_schedule(&self, mask: &LayerMask, path: &ScanPath, settings: &RenderSettings) -> Result<SpatterSchedule> {
        let sp = &self.spec.spatter;
        let mut schedule = SpatterSchedule::default();
        if sp.per_layer == 0 || mask.is_empty() {
            return Ok(schedule);
        }
        let (w, h) = self.grid.dims();
        let dt = 1.0 / settings.fps;
        let times = pixel_visit_times(path, mask);
        let visit: Vec<i64> = times
            .iter()
            .map(|t| t.map_or(i64::MAX, |t| ((t + settings.laser_start_s) / dt - 1e-9).ceil() as i64))
            .collect();
        let (first, last) = mask.pixels.iter().fold((i64::MAX, 0), |(a, b), &(x, y)| {
            let v = visit[y * w + x];
            (a.min(v), b.max(v))
        });
        let last = last.min(settings.frames as i64 - 1 - sp.lookahead_frames as i64);
        if last < first {
            return Ok(schedule);
        }
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for &(x, y) in &mask.pixels {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let border = 4;
        let lo_x = x0.saturating_sub(sp.reach_px).max(border);
        let lo_y = y0.saturating_sub(sp.reach_px).max(border);
        let hi_x = (x1 + sp.reach_px).min(w.saturating_sub(border + 1));
        let hi_y = (y1 + sp.reach_px).min(h.saturating_sub(border + 1));
        if lo_x > hi_x || lo_y > hi_y {
            return Ok(schedule);
        }
        let r = sp.clearance_px.ceil() as isize;
        let disk: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
            .filter(|&(dx, dy)| ((dx * dx + dy * dy) as f64) < sp.clearance_px * sp.clearance_px)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0xA5A5_0000_5A5A ^ (mask.layer as u64) << 20);
        let mut attempts = 0;
        while schedule.events.len() < sp.per_layer && attempts < 20_000 {
            attempts += 1;
            let emit = rng.gen_range(first..=last);
            let x = rng.gen_range(lo_x..=hi_x);
            let y = rng.gen_range(lo_y..=hi_y);
            let horizon = emit + sp.lookahead_frames as i64;
            let clear = disk.iter().all(|&(dx, dy)| {
                let (qx, qy) = (x as isize + dx, y as isize + dy);
                qx < 0 || qy < 0 || qx >= w as isize || qy >= h as isize || visit[qy as usize * w + qx as usize] > horizon
            });
            let apart = schedule.events.iter().all(|e| {
                let d2 = (e.pixel.0 as f64 - x as f64).powi(2) + (e.pixel.1 as f64 - y as f64).powi(2);
                d2 >= sp.separation_px * sp.separation_px
            });
            if clear && apart {
                schedule.events.push(SpatterEvent {
                    emit_frame: emit as usize,
                    pixel: (x, y),
                    delta_c: rng.gen_range(sp.delta_c[0]..=sp.delta_c[1]),
                    decay_s: sp.decay_s,
                });
            }
        }
        if schedule.events.len() < sp.per_layer {
            log::warn!(
                "layer {}: placed {} of {} spatter events",
                mask.layer,
                schedule.events.len(),
                sp.per_layer
            );
        }
        Ok(schedule)
    }
}

/// Writes every layer's stack into `dir` and returns the realized spatter
/// events and per-layer truth.
pub fn simulate_to_dir(sim: &Simulation, dir: &Path) -> Result<Vec<GroundTruth>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut truths = Vec::new();
    for layer in 0..sim.layer_count() {
        let (stack, truth) = sim.render(layer)?;
        stack.write(&crate::framestack::layer_path(dir, layer))?;
        truths.push(truth);
    }
    let events: Vec<(usize, SpatterEvent)> = truths
        .iter()
        .flat_map(|t| t.spatter_events.iter().map(move |e| (t.layer, *e)))
        .collect();
    let p = dir.join("spatter_truth.csv");
    std::fs::write(&p, format_spatter_events(&events)).map_err(|e| Error::io(&p, e))?;
    Ok(truths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{TriangleMesh, DEFAULT_PITCH_UM};

    fn demo_sim(spatter: usize) -> Simulation {
        let b = TriangleMesh::cuboid([-2.52, -2.52, 0.0], [2.52, 2.52, 0.08]);
        let voxels = voxelize_parts(&[("b".into(), b)], DEFAULT_PITCH_UM, None).unwrap();
        let spec = SimulationSpec {
            frames_per_layer: 40,
            grid: GridSpec {
                width: 64,
                height: 48,
                ..GridSpec::default()
            },
            spatter: SpatterSpec {
                per_layer: spatter,
                reach_px: 12,
                ..SpatterSpec::default()
            },
            ..SimulationSpec::default()
        };
        Simulation::new(spec, voxels).unwrap()
    }

    #[test]
    fn spec_toml_round_trip() {
        let text = r#"
            seed = 5
            frames_per_layer = 50
            stl = ["part.stl"]
            noise_relative = 0.01
            [grid]
            width = 100
            [scan]
            scan_speed = 500.0
            [spatter]
            per_layer = 3
            events = """
            0, 10, 5, 6, 700, 0.1
            # comment
            1, 12, 7, 8, 800, 0.2
            """
            [[recoat_streak]]
            row = 5
            x_start = 2
            x_end = 9
        "#;
        let s = SimulationSpec::from_toml(text).unwrap();
        assert_eq!(s.grid.width, 100);
        assert_eq!(s.scan.scan_speed, 500.0);
        assert_eq!(parse_spatter_events(&s.spatter.events).unwrap().len(), 2);
        assert_eq!(SimulationSpec::from_toml(&s.to_toml()).unwrap(), s);
        assert!(SimulationSpec::from_toml("noise_relative = 0.1\nnoise_sigma_counts = 3.0").is_err());
        assert!(SimulationSpec::from_toml("[spatter]\nevents = \"1,2,3\"").is_err());
        assert!(SimulationSpec::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn random_spatter_respects_clearance() {
        let sim = demo_sim(5);
        let (_, truth) = sim.render(0).unwrap();
        assert_eq!(truth.spatter_events.len(), 5);
        for e in &truth.spatter_events {
            for y in 0..48 {
                for x in 0..64 {
                    let v = truth.visit_frame.get(x, y);
                    if v >= 0 && v <= e.emit_frame as i64 + 8 {
                        let d = (x as f64 - e.pixel.0 as f64).hypot(y as f64 - e.pixel.1 as f64);
                        assert!(d >= 8.0);
                    }
                }
            }
        }
        let again = sim.render(0).unwrap().1;
        assert_eq!(again.spatter_events, truth.spatter_events);
    }

    #[test]
    fn layers_above_part_render_ambient() {
        let mut sim = demo_sim(0);
        sim.spec.layers = Some(3);
        assert_eq!(sim.layer_count(), 3);
        let (stack, truth) = sim.render(2).unwrap();
        assert_eq!(truth.first_visit_frame, None);
        let first = stack.frames[0].values()[0];
        assert!(stack.frames.iter().all(|f| f.values().iter().all(|&c| c == first)));
    }

    #[test]
    fn files_written() {
        let sim = demo_sim(2);
        let dir = tempfile::tempdir().unwrap();
        let truths = simulate_to_dir(&sim, dir.path()).unwrap();
        assert_eq!(truths.len(), 2);
        assert_eq!(crate::framestack::list_layers(dir.path()).unwrap(), vec![0, 1]);
        let events = std::fs::read_to_string(dir.path().join("spatter_truth.csv")).unwrap();
        assert_eq!(parse_spatter_events(&events).unwrap().len(), 4);
    }
}
