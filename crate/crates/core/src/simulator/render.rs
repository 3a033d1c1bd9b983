use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::path::{pixel_visit_times, ScanPath};
use crate::error::{Error, Result};
use crate::framestack::LayerStack;
use crate::geometry::LayerMask;
use crate::imageops::{Grid, Grid2D, NEVER_UPDATED};
use crate::radiometry::{forward_unchecked, quantize_counts, CalibrationProfile};
use crate::spatial::{warp_frame, Homography};

fn default_ambient() -> f64 {
    80.0
}
fn default_peak() -> f64 {
    1600.0
}
fn default_fwhm() -> f64 {
    1.2
}
fn default_decay() -> f64 {
    0.1
}
fn default_residual_rise() -> f64 {
    150.0
}
fn default_residual_sigma() -> f64 {
    3.0
}
fn default_residual_decay() -> f64 {
    1.5
}

/// Phenomenological thermal field: a fixed ambient plane plus two decaying
/// Gaussian sources dropped on each pixel as the laser visits it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalParameters {
    /// Powder-bed temperature at the plate center, °C.
    #[serde(default = "default_ambient")]
    pub ambient_c: f64,
    /// Lateral ambient gradient along plate x and y, °C/mm.
    #[serde(default)]
    pub ambient_gradient_c_per_mm: [f64; 2],
    /// Ambient increase per layer, °C.
    #[serde(default)]
    pub ambient_per_layer_c: f64,
    /// Melt-pool source amplitude, °C.
    #[serde(default = "default_peak")]
    pub peak_rise_c: f64,
    /// Melt-pool source full width at half maximum, px.
    #[serde(default = "default_fwhm")]
    pub footprint_fwhm_px: f64,
    /// Melt-pool source decay constant, s.
    #[serde(default = "default_decay")]
    pub decay_s: f64,
    /// Rise of a fully scanned area from the slow residual-heat source, °C.
    #[serde(default = "default_residual_rise")]
    pub residual_rise_c: f64,
    #[serde(default = "default_residual_sigma")]
    pub residual_sigma_px: f64,
    #[serde(default = "default_residual_decay")]
    pub residual_decay_s: f64,
}

impl Default for ThermalParameters {
    fn default() -> Self {
        ThermalParameters {
            ambient_c: default_ambient(),
            ambient_gradient_c_per_mm: [0.0, 0.0],
            ambient_per_layer_c: 0.0,
            peak_rise_c: default_peak(),
            footprint_fwhm_px: default_fwhm(),
            decay_s: default_decay(),
            residual_rise_c: default_residual_rise(),
            residual_sigma_px: default_residual_sigma(),
            residual_decay_s: default_residual_decay(),
        }
    }
}

impl ThermalParameters {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("decay_s", self.decay_s),
            ("residual_decay_s", self.residual_decay_s),
            ("residual_sigma_px", self.residual_sigma_px),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Parameter(format!("thermal {name} must be positive, got {v}")));
            }
        }
        if !(self.footprint_fwhm_px >= 1.0) {
            return Err(Error::Parameter(format!(
                "melt-pool footprint must be at least 1 px, got {}",
                self.footprint_fwhm_px
            )));
        }
        for v in [self.ambient_c, self.peak_rise_c, self.residual_rise_c, self.ambient_per_layer_c] {
            if !v.is_finite() {
                return Err(Error::Parameter("thermal parameters must be finite".into()));
            }
        }
        if self.peak_rise_c < 0.0 || self.residual_rise_c < 0.0 {
            return Err(Error::Parameter("source amplitudes must be non-negative".into()));
        }
        Ok(())
    }

    /// Ambient temperature at a plate position on a given layer.
    pub fn ambient_at(&self, layer: usize, p: (f64, f64)) -> f64 {
        let [gx, gy] = self.ambient_gradient_c_per_mm;
        self.ambient_c + layer as f64 * self.ambient_per_layer_c + gx * p.0 + gy * p.1
    }
}

/// One hot spatter particle landing on the bed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatterEvent {
    /// First frame showing the particle.
    pub emit_frame: usize,
    /// Corrected-grid landing pixel.
    pub pixel: (usize, usize),
    pub delta_c: f64,
    pub decay_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpatterSchedule {
    pub events: Vec<SpatterEvent>,
}

impl SpatterSchedule {
    pub fn validate(&self, width: usize, height: usize, frames: usize) -> Result<()> {
        for (n, e) in self.events.iter().enumerate() {
            if e.pixel.0 >= width || e.pixel.1 >= height {
                return Err(Error::Parameter(format!(
                    "spatter event {n} lands at {:?}, outside {width}x{height}",
                    e.pixel
                )));
            }
            if e.emit_frame >= frames {
                return Err(Error::Parameter(format!(
                    "spatter event {n} emitted at frame {}, layer has {frames} frames",
                    e.emit_frame
                )));
            }
            if !(e.delta_c > 0.0 && e.decay_s > 0.0) {
                return Err(Error::Parameter(format!(
                    "spatter event {n} needs positive delta and decay"
                )));
            }
        }
        Ok(())
    }
}

/// A row of bare metal left uncovered by the recoater: powder state with
/// `emissivity` instead of the powder value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoatStreak {
    pub row: usize,
    pub x_start: usize,
    pub x_end: usize,
    pub emissivity: Option<f64>,
    /// First and last layer showing the streak; all layers when absent.
    pub layers: Option<[usize; 2]>,
}

impl RecoatStreak {
    fn applies(&self, layer: usize) -> bool {
        self.layers.map_or(true, |[a, b]| layer >= a && layer <= b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseLevel {
    /// Fraction of the layer's noiseless count range.
    Relative(f64),
    /// Absolute standard deviation in counts.
    Counts(f64),
}

/// Everything besides geometry and scan path that shapes the rendered frames.
#[derive(Debug, Clone)]
pub struct RenderSettings {
    pub frames: usize,
    pub fps: f64,
    /// Delay between the first frame and the laser starting the layer, s.
    pub laser_start_s: f64,
    pub thermal: ThermalParameters,
    /// Maps corrected-grid pixels to raw camera pixels.
    pub homography: Homography,
    pub noise: NoiseLevel,
    pub seed: u64,
    /// Relative as-printed emissivity jitter in stripe-overlap pixels.
    pub overlap_jitter: f64,
    pub streaks: Vec<RecoatStreak>,
    /// Keep the full true temperature field of every frame in the ground truth.
    pub keep_temperatures: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            frames: 200,
            fps: crate::framestack::DEFAULT_FPS,
            laser_start_s: 3.5 / crate::framestack::DEFAULT_FPS,
            thermal: ThermalParameters::default(),
            homography: Homography::identity(),
            noise: NoiseLevel::Counts(0.0),
            seed: 0,
            overlap_jitter: 0.0,
            streaks: Vec::new(),
            keep_temperatures: false,
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Parameter("frame count must be positive".into()));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Parameter(format!("frame rate must be positive, got {}", self.fps)));
        }
        if !(self.laser_start_s.is_finite() && self.laser_start_s >= 0.0) {
            return Err(Error::Parameter("laser start must be non-negative".into()));
        }
        let sigma = match self.noise {
            NoiseLevel::Relative(r) => r,
            NoiseLevel::Counts(c) => c,
        };
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::Parameter(format!("noise level must be non-negative, got {sigma}")));
        }
        if !(self.overlap_jitter >= 0.0 && self.overlap_jitter < 1.0) {
            return Err(Error::Parameter("overlap jitter must be in [0, 1)".into()));
        }
        self.thermal.validate()
    }
}

/// Oracle for one rendered layer, in corrected-grid coordinates.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub layer: usize,
    /// Frame at which each pixel's true temperature peaks;
    /// [`NEVER_UPDATED`] for pixels the laser never visited.
    pub true_scan_order: Grid<i64>,
    /// First frame at or after each pixel's laser visit.
    pub visit_frame: Grid<i64>,
    pub spatter_events: Vec<SpatterEvent>,
    /// True powder temperature before the laser starts.
    pub true_interpass: Grid2D,
    /// Emissivity of each pixel after the layer is complete.
    pub emissivity_map: Grid2D,
    pub applied_homography: Homography,
    pub noise_sigma_counts: f64,
    /// Frame index of the first laser visit.
    pub first_visit_frame: Option<usize>,
    pub path_length_mm: f64,
    pub path_duration_s: f64,
    pub stripes: usize,
    pub overlap_pixels: Vec<(usize, usize)>,
    pub temperatures: Option<Vec<Grid2D>>,
}

/// Pixel-centered kernel of integer offsets within `radius`.
fn kernel(radius: isize, f: impl Fn(f64) -> f64) -> Vec<(isize, isize, f64)> {
    let mut out = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            out.push((dx, dy, f((dx * dx + dy * dy) as f64)));
        }
    }
    out
}

struct Roi {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

impl Roi {
    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && y >= self.y0 && x < self.x0 + self.w && y < self.y0 + self.h
    }

    fn index(&self, x: usize, y: usize) -> usize {
        (y - self.y0) * self.w + (x - self.x0)
    }
}

/// Renders the raw frames of one layer and its ground truth.
///
/// Each visited pixel drops a melt-pool source (peak `peak_rise_c`) and a
/// normalized residual-heat source at its visit time; both decay
/// exponentially and superpose on the ambient plane. Spatter adds a decaying
/// single-pixel spike. Emissivity is powder up to the pixel's true peak frame
/// and as-printed afterwards. Counts are warped by the settings' homography
/// and seeded Gaussian noise is added before quantization.
pub fn render_layer(
    mask: &LayerMask,
    path: &ScanPath,
    schedule: &SpatterSchedule,
    settings: &RenderSettings,
    profile: &CalibrationProfile,
) -> Result<(LayerStack, GroundTruth)> {
    settings.validate()?;
    profile.validate()?;
    let reg = &mask.registration;
    let (w, h) = reg.dims();
    let n = settings.frames;
    let layer = mask.layer;
    schedule.validate(w, h, n)?;
    let th = &settings.thermal;
    let dt = 1.0 / settings.fps;

    let eps_powder = profile.emissivity_powder;
    let eps_printed = profile.emissivity_printed;
    let mut powder_eps = vec![eps_powder; w * h];
    for s in settings.streaks.iter().filter(|s| s.applies(layer)) {
        if s.row >= h || s.x_start >= s.x_end || s.x_end > w {
            return Err(Error::Parameter(format!("recoat streak {s:?} outside {w}x{h}")));
        }
        let e = s.emissivity.unwrap_or(eps_printed);
        if !(e > 0.0 && e <= 1.0) {
            return Err(Error::Parameter(format!("streak emissivity {e} outside (0, 1]")));
        }
        powder_eps[s.row * w + s.x_start..s.row * w + s.x_end].fill(e);
    }
    let ambient: Vec<f64> = (0..w * h)
        .map(|i| th.ambient_at(layer, reg.pixel_to_world(((i % w) as f64, (i / w) as f64))))
        .collect();

    // Visits in time order.
    let visit_times = pixel_visit_times(path, mask);
    let mut visits: Vec<(f64, usize, usize)> = mask
        .pixels
        .iter()
        .filter_map(|&(x, y)| visit_times[y * w + x].map(|t| (t + settings.laser_start_s, x, y)))
        .collect();
    visits.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.2, a.1).cmp(&(b.2, b.1))));

    let fast_sigma = th.footprint_fwhm_px / (8.0 * std::f64::consts::LN_2).sqrt();
    let fast_r = (3.0 * fast_sigma).ceil() as isize;
    let fast_k = kernel(fast_r, |d2| th.peak_rise_c * (-d2 / (2.0 * fast_sigma * fast_sigma)).exp());
    let slow_r = (3.0 * th.residual_sigma_px).ceil() as isize;
    let mut slow_k = kernel(slow_r, |d2| (-d2 / (2.0 * th.residual_sigma_px.powi(2))).exp());
    let norm: f64 = slow_k.iter().map(|k| k.2).sum();
    for k in &mut slow_k {
        k.2 *= th.residual_rise_c / norm;
    }

    // Region where the field departs from ambient.
    let margin = fast_r.max(slow_r) as usize + 1;
    let mut bx = [usize::MAX, usize::MAX, 0, 0];
    let mut grow = |x: usize, y: usize, m: usize| {
        bx[0] = bx[0].min(x.saturating_sub(m));
        bx[1] = bx[1].min(y.saturating_sub(m));
        bx[2] = bx[2].max((x + m + 1).min(w));
        bx[3] = bx[3].max((y + m + 1).min(h));
    };
    for &(_, x, y) in &visits {
        grow(x, y, margin);
    }
    for e in &schedule.events {
        grow(e.pixel.0, e.pixel.1, 0);
    }
    let roi = if bx[0] == usize::MAX {
        Roi { x0: 0, y0: 0, w: 0, h: 0 }
    } else {
        Roi {
            x0: bx[0],
            y0: bx[1],
            w: bx[2] - bx[0],
            h: bx[3] - bx[1],
        }
    };

    // Pass 1: true temperatures inside the ROI for every frame.
    let rn = roi.w * roi.h;
    let mut fast = vec![0.0; rn];
    let mut slow = vec![0.0; rn];
    let mut roi_temps: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut next_visit = 0;
    let mut visit_frame = Grid::filled(w, h, NEVER_UPDATED)?;
    let fast_decay = (-dt / th.decay_s).exp();
    let slow_decay = (-dt / th.residual_decay_s).exp();
    let deposit = |field: &mut [f64], k: &[(isize, isize, f64)], x: usize, y: usize, scale: f64| {
        for &(dx, dy, v) in k {
            let (qx, qy) = (x as isize + dx, y as isize + dy);
            if qx < 0 || qy < 0 {
                continue;
            }
            let (qx, qy) = (qx as usize, qy as usize);
            if roi.contains(qx, qy) {
                field[roi.index(qx, qy)] += v * scale;
            }
        }
    };
    for f in 0..n {
        let t_f = f as f64 * dt;
        if f > 0 {
            fast.iter_mut().for_each(|v| *v *= fast_decay);
            slow.iter_mut().for_each(|v| *v *= slow_decay);
        }
        while next_visit < visits.len() && visits[next_visit].0 <= t_f {
            let (t_v, x, y) = visits[next_visit];
            deposit(&mut fast, &fast_k, x, y, (-(t_f - t_v) / th.decay_s).exp());
            deposit(&mut slow, &slow_k, x, y, (-(t_f - t_v) / th.residual_decay_s).exp());
            visit_frame.set(x, y, f as i64);
            next_visit += 1;
        }
        let mut temps: Vec<f64> = (0..rn)
            .map(|i| ambient[(roi.y0 + i / roi.w) * w + roi.x0 + i % roi.w] + fast[i] + slow[i])
            .collect();
        for e in &schedule.events {
            if f >= e.emit_frame {
                let age = (f - e.emit_frame) as f64 * dt;
                temps[roi.index(e.pixel.0, e.pixel.1)] += e.delta_c * (-age / e.decay_s).exp();
            }
        }
        roi_temps.push(temps);
    }

    // True peak frame of every visited pixel.
    let mut true_scan_order = Grid::filled(w, h, NEVER_UPDATED)?;
    for &(_, x, y) in &visits {
        let i = roi.index(x, y);
        let mut best = (f64::NEG_INFINITY, NEVER_UPDATED);
        for (f, temps) in roi_temps.iter().enumerate() {
            if temps[i] > best.0 {
                best = (temps[i], f as i64);
            }
        }
        if visit_frame.get(x, y) != NEVER_UPDATED {
            true_scan_order.set(x, y, best.1);
        }
    }

    // As-printed emissivity, jittered in stripe overlaps.
    let mut printed_eps = vec![eps_printed; w * h];
    if settings.overlap_jitter > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x5EED_0F_0FF5E7 ^ layer as u64);
        for &(x, y) in &path.overlap_pixels {
            let u: f64 = rng.gen_range(-1.0..=1.0);
            printed_eps[y * w + x] = (eps_printed * (1.0 + settings.overlap_jitter * u)).clamp(1e-3, 1.0);
        }
    }
    let eps_at = |x: usize, y: usize, f: usize| -> f64 {
        let s = true_scan_order.get(x, y);
        if s != NEVER_UPDATED && f as i64 > s {
            printed_eps[y * w + x]
        } else {
            powder_eps[y * w + x]
        }
    };

    // Pass 2: noiseless counts.
    let base: Vec<f64> = (0..w * h)
        .map(|i| forward_unchecked(ambient[i], powder_eps[i], profile))
        .collect();
    let mut counts: Vec<Vec<f64>> = Vec::with_capacity(n);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in &base {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    for (f, temps) in roi_temps.iter().enumerate() {
        let mut frame = base.clone();
        for (i, &t) in temps.iter().enumerate() {
            let (x, y) = (roi.x0 + i % roi.w, roi.y0 + i / roi.w);
            let c = forward_unchecked(t, eps_at(x, y, f), profile);
            lo = lo.min(c);
            hi = hi.max(c);
            frame[y * w + x] = c;
        }
        counts.push(frame);
    }
    let sigma = match settings.noise {
        NoiseLevel::Relative(r) => r * (hi - lo),
        NoiseLevel::Counts(c) => c,
    };

    let temperatures = if settings.keep_temperatures {
        let frames = roi_temps
            .iter()
            .map(|temps| {
                let mut g = ambient.clone();
                for (i, &t) in temps.iter().enumerate() {
                    g[(roi.y0 + i / roi.w) * w + roi.x0 + i % roi.w] = t;
                }
                Grid2D::from_vec(w, h, g)
            })
            .collect::<Result<Vec<_>>>()?;
        Some(frames)
    } else {
        None
    };
    drop(roi_temps);

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let identity = settings.homography.is_identity();
    let mut frames = Vec::with_capacity(n);
    for c in counts {
        let mut values = if identity {
            c
        } else {
            let g = Grid2D::from_vec(w, h, c)?;
            warp_frame(&g, &settings.homography, (w, h))?.grid.into_values()
        };
        if sigma > 0.0 {
            for v in &mut values {
                *v += normal.sample(&mut rng);
            }
        }
        frames.push(Grid::from_vec(w, h, values.into_iter().map(quantize_counts).collect())?);
    }
    let stack = LayerStack::new(layer, settings.fps, frames)?;

    let emissivity_map = Grid2D::from_fn(w, h, |x, y| eps_at(x, y, n))?;
    let truth = GroundTruth {
        layer,
        true_scan_order,
        visit_frame,
        spatter_events: schedule.events.clone(),
        true_interpass: Grid2D::from_vec(w, h, ambient)?,
        emissivity_map,
        applied_homography: settings.homography,
        noise_sigma_counts: sigma,
        first_visit_frame: visits.first().map(|v| (v.0 / dt).ceil() as usize),
        path_length_mm: path.length_mm,
        path_duration_s: path.duration_s,
        stripes: path.stripes,
        overlap_pixels: path.overlap_pixels.clone(),
        temperatures,
    };
    Ok((stack, truth))
}
