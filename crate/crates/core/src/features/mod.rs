//! Per-layer feature extractors over an ordered frame stack.
//!
//! Every extractor returns a [`FeatureMap`] aligned to the corrected pixel
//! grid. Invalid pixels hold NaN and are flagged in the validity grid.

mod spatter;
mod thermal;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framestack::LayerStack;
use crate::geometry::LayerMask;
use crate::imageops::{Grid, Grid2D};
use crate::radiometry::{forward_counts, CalibrationProfile, CountsLut};

pub use spatter::{spatter_frame_filter, spatter_layer, SpatterFrame, SpatterLayer, SpatterRecord};
pub use thermal::{
    asprinted_laplacian, asprinted_laplacian_from_temperature, cooling_rate, first_active_frame,
    heat_intensity_and_scan_order, interpass, interpass_laplacian, local_predeposition, max_predeposition,
    melt_pool_area,
};

/// Feature maps produced per layer.
///
/// Spatter counting yields two maps (where spatter was generated and where it
/// landed), so the ten features give eleven ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureId {
    Interpass,
    HeatIntensity,
    ScanOrder,
    LocalPredeposition,
    MaxPredeposition,
    SpatterGeneration,
    SpatterLanding,
    MeltPoolArea,
    CoolingRate,
    InterpassLaplacian,
    AsprintedLaplacian,
}

impl FeatureId {
    pub const ALL: [FeatureId; 11] = [
        FeatureId::Interpass,
        FeatureId::HeatIntensity,
        FeatureId::ScanOrder,
        FeatureId::LocalPredeposition,
        FeatureId::MaxPredeposition,
        FeatureId::SpatterGeneration,
        FeatureId::SpatterLanding,
        FeatureId::MeltPoolArea,
        FeatureId::CoolingRate,
        FeatureId::InterpassLaplacian,
        FeatureId::AsprintedLaplacian,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<FeatureId> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureId::Interpass => "interpass",
            FeatureId::HeatIntensity => "heat_intensity",
            FeatureId::ScanOrder => "scan_order",
            FeatureId::LocalPredeposition => "local_predeposition",
            FeatureId::MaxPredeposition => "max_predeposition",
            FeatureId::SpatterGeneration => "spatter_generation",
            FeatureId::SpatterLanding => "spatter_landing",
            FeatureId::MeltPoolArea => "melt_pool_area",
            FeatureId::CoolingRate => "cooling_rate",
            FeatureId::InterpassLaplacian => "interpass_laplacian",
            FeatureId::AsprintedLaplacian => "asprinted_laplacian",
        }
    }

    pub fn units(self) -> &'static str {
        match self {
            FeatureId::Interpass | FeatureId::LocalPredeposition | FeatureId::MaxPredeposition => "degC",
            FeatureId::HeatIntensity => "counts",
            FeatureId::ScanOrder => "frame",
            FeatureId::SpatterGeneration | FeatureId::SpatterLanding => "count",
            FeatureId::MeltPoolArea => "pixels",
            FeatureId::CoolingRate => "degC/s",
            FeatureId::InterpassLaplacian | FeatureId::AsprintedLaplacian => "degC/px^2",
        }
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown feature '{s}'")))
    }
}

/// Parses a comma-separated feature list.
pub fn parse_feature_list(s: &str) -> Result<Vec<FeatureId>> {
    let mut out: Vec<FeatureId> = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        return Err(Error::Config("empty feature list".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Validity {
    Valid,
    /// Value taken from a shortened window (see the pre-deposition features).
    Clamped,
    Invalid,
}

impl Validity {
    pub fn is_usable(self) -> bool {
        self != Validity::Invalid
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub feature: FeatureId,
    pub layer: usize,
    pub grid: Grid2D,
    pub validity: Grid<Validity>,
}

impl FeatureMap {
    /// Map with every pixel invalid.
    pub fn invalid(feature: FeatureId, layer: usize, width: usize, height: usize) -> Result<Self> {
        Ok(FeatureMap {
            feature,
            layer,
            grid: Grid2D::filled(width, height, f64::NAN)?,
            validity: Grid::filled(width, height, Validity::Invalid)?,
        })
    }

    /// Map with every pixel valid.
    pub fn from_grid(feature: FeatureId, layer: usize, grid: Grid2D) -> Self {
        let validity = grid.map(|_| Validity::Valid);
        FeatureMap {
            feature,
            layer,
            grid,
            validity,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dims()
    }

    pub fn set(&mut self, x: usize, y: usize, value: f64, validity: Validity) {
        let v = if validity == Validity::Invalid { f64::NAN } else { value };
        self.grid.set(x, y, v);
        self.validity.set(x, y, validity);
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        self.validity.get(x, y).is_usable().then(|| self.grid.get(x, y))
    }

    pub fn valid_values(&self) -> Vec<f64> {
        self.grid
            .values()
            .iter()
            .zip(self.validity.values())
            .filter(|(_, v)| v.is_usable())
            .map(|(&x, _)| x)
            .collect()
    }

    pub fn valid_count(&self) -> usize {
        self.validity.values().iter().filter(|v| v.is_usable()).count()
    }

    /// Invalidates every pixel outside the row-major `keep` mask.
    pub fn restrict(&mut self, keep: &[bool]) {
        for ((g, v), &k) in self
            .grid
            .values_mut()
            .iter_mut()
            .zip(self.validity.values_mut())
            .zip(keep)
        {
            if !k {
                *g = f64::NAN;
                *v = Validity::Invalid;
            }
        }
    }

    /// Copies this map into a larger frame at offset `(x0, y0)`.
    fn embed(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<FeatureMap> {
        let mut out = FeatureMap::invalid(self.feature, self.layer, width, height)?;
        let (w, h) = self.dims();
        for y in 0..h {
            for x in 0..w {
                out.set(x0 + x, y0 + y, self.grid.get(x, y), self.validity.get(x, y));
            }
        }
        Ok(out)
    }
}

/// Scan-order frame of a pixel, if scanned.
pub(crate) fn scan_frame(scan_order: &FeatureMap, index: usize) -> Option<usize> {
    scan_order.validity.values()[index]
        .is_usable()
        .then(|| scan_order.grid.values()[index] as usize)
}

fn default_offset() -> usize {
    10
}
fn default_window() -> usize {
    30
}
fn default_mask_sigma() -> f64 {
    3.0
}
fn default_sigma_one() -> f64 {
    1.0
}
fn default_dilation() -> usize {
    2
}
fn default_prescan() -> usize {
    3
}
fn default_noise_k() -> f64 {
    6.0
}
fn default_min_response() -> f64 {
    5.0
}
fn default_margin() -> usize {
    32
}
fn default_true() -> bool {
    true
}

/// Tunable extraction parameters. Thresholds left unset are derived from the
/// calibration profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureParams {
    #[serde(default = "default_offset")]
    pub offset_frames: usize,
    #[serde(default = "default_window")]
    pub cooling_window: usize,
    #[serde(default = "default_mask_sigma")]
    pub mask_sigma: f64,
    #[serde(default = "default_sigma_one")]
    pub blob_sigma: f64,
    #[serde(default = "default_dilation")]
    pub dilation_radius: usize,
    #[serde(default = "default_sigma_one")]
    pub laplacian_sigma: f64,
    /// Raw counts above which a pixel counts as laser-heated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activity_threshold: Option<f64>,
    /// Raw counts above which a pixel counts toward the melt-pool area.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub melt_threshold: Option<f64>,
    /// Upper bound on pre-scan frames averaged for the interpass map.
    #[serde(default = "default_prescan")]
    pub prescan_frames: usize,
    /// Spatter candidates must exceed this many robust noise deviations.
    #[serde(default = "default_noise_k")]
    pub spatter_noise_k: f64,
    /// Smallest negated LoG response (°C/px²) accepted as spatter.
    #[serde(default = "default_min_response")]
    pub spatter_min_response: f64,
    /// Process only the part footprint plus this margin.
    #[serde(default = "default_true")]
    pub crop_to_part: bool,
    #[serde(default = "default_margin")]
    pub crop_margin_px: usize,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams {
            offset_frames: default_offset(),
            cooling_window: default_window(),
            mask_sigma: default_mask_sigma(),
            blob_sigma: default_sigma_one(),
            dilation_radius: default_dilation(),
            laplacian_sigma: default_sigma_one(),
            activity_threshold: None,
            melt_threshold: None,
            prescan_frames: default_prescan(),
            spatter_noise_k: default_noise_k(),
            spatter_min_response: default_min_response(),
            crop_to_part: true,
            crop_margin_px: default_margin(),
        }
    }
}

impl FeatureParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64, max: f64| {
            if !(v.is_finite() && v > 0.0 && v <= max) {
                return Err(Error::Config(format!("{name} must be in (0, {max}], got {v}")));
            }
            Ok(())
        };
        positive("mask_sigma", self.mask_sigma, 20.0)?;
        positive("blob_sigma", self.blob_sigma, 20.0)?;
        positive("laplacian_sigma", self.laplacian_sigma, 20.0)?;
        positive("spatter_noise_k", self.spatter_noise_k, 100.0)?;
        positive("spatter_min_response", self.spatter_min_response, 1e6)?;
        if self.cooling_window == 0 || self.cooling_window > 10_000 {
            return Err(Error::Config(format!("cooling_window out of range: {}", self.cooling_window)));
        }
        if self.offset_frames > 10_000 {
            return Err(Error::Config(format!("offset_frames out of range: {}", self.offset_frames)));
        }
        if self.prescan_frames == 0 {
            return Err(Error::Config("prescan_frames must be at least 1".into()));
        }
        if self.dilation_radius > 50 {
            return Err(Error::Config(format!("dilation_radius out of range: {}", self.dilation_radius)));
        }
        for (name, t) in [("activity_threshold", self.activity_threshold), ("melt_threshold", self.melt_threshold)] {
            if let Some(t) = t {
                if !(t.is_finite() && t >= 0.0 && t <= u16::MAX as f64) {
                    return Err(Error::Config(format!("{name} must be within the 16-bit count range, got {t}")));
                }
            }
        }
        Ok(())
    }

    pub fn thresholds(&self, profile: &CalibrationProfile) -> Result<Thresholds> {
        Ok(Thresholds {
            activity: match self.activity_threshold {
                Some(t) => t,
                None => default_activity_threshold(profile)?,
            },
            melt: match self.melt_threshold {
                Some(t) => t,
                None => default_melt_threshold(profile)?,
            },
        })
    }
}

/// Counts of a 660 °C unit-emissivity surface: the laser-activity cutoff.
pub fn default_activity_threshold(profile: &CalibrationProfile) -> Result<f64> {
    forward_counts(660.0, 1.0, profile)
}

/// Counts of a 660 °C surface at emissivity 0.1: the melt-pool cutoff.
pub fn default_melt_threshold(profile: &CalibrationProfile) -> Result<f64> {
    forward_counts(660.0, 0.1, profile)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub activity: f64,
    pub melt: f64,
}

/// Count-to-temperature tables for both surface states.
#[derive(Debug, Clone)]
pub struct Converters {
    pub powder: CountsLut,
    pub printed: CountsLut,
    /// Lower clamp applied before spatial filtering (°C).
    pub filter_floor: f64,
}

impl Converters {
    pub fn new(profile: &CalibrationProfile) -> Result<Self> {
        Ok(Converters {
            powder: CountsLut::new(profile.emissivity_powder, profile)?,
            printed: CountsLut::new(profile.emissivity_printed, profile)?,
            filter_floor: profile.reflected_temperature,
        })
    }

    /// Temperature used by the spatial filters: below-floor and sub-ambient
    /// readings are outside the model and are clamped to the reflected
    /// ambient temperature.
    #[inline]
    pub(crate) fn filtered(&self, lut: &CountsLut, counts: u16) -> f64 {
        lut.get(counts).map_or(self.filter_floor, |t| t.max(self.filter_floor))
    }
}

/// Per-layer scalars reported alongside the maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub frames: usize,
    pub first_active_frame: Option<usize>,
    pub prescan_frames: usize,
    pub scanned_pixels: usize,
    pub part_pixels: usize,
    pub spatter_count: usize,
    pub crop: [usize; 4],
}

#[derive(Debug, Clone)]
pub struct LayerFeatures {
    pub maps: Vec<FeatureMap>,
    pub spatters: Vec<SpatterRecord>,
    pub summary: LayerSummary,
}

impl LayerFeatures {
    pub fn map(&self, id: FeatureId) -> Option<&FeatureMap> {
        self.maps.iter().find(|m| m.feature == id)
    }
}

fn crop_box(mask: &LayerMask, params: &FeatureParams, w: usize, h: usize) -> [usize; 4] {
    if !params.crop_to_part || mask.is_empty() {
        return [0, 0, w, h];
    }
    let m = params.crop_margin_px;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for &(x, y) in &mask.pixels {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let (x0, y0) = (x0.saturating_sub(m), y0.saturating_sub(m));
    let (x1, y1) = ((x1 + m + 1).min(w), (y1 + m + 1).min(h));
    [x0, y0, x1 - x0, y1 - y0]
}

fn crop_stack(stack: &LayerStack, [x0, y0, cw, ch]: [usize; 4]) -> Result<LayerStack> {
    if (x0, y0) == (0, 0) && (cw, ch) == stack.dims() {
        return Ok(stack.clone());
    }
    let frames = stack
        .frames
        .iter()
        .map(|f| Grid::from_fn(cw, ch, |x, y| f.get(x0 + x, y0 + y)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerStack {
        layer: stack.layer,
        fps: stack.fps,
        recoat_boundary: stack.recoat_boundary,
        frames,
    })
}

/// Runs the selected extractors on one layer and restricts every map to the
/// part footprint in `mask`.
pub fn extract_layer(
    stack: &LayerStack,
    mask: &LayerMask,
    profile: &CalibrationProfile,
    params: &FeatureParams,
    selected: &[FeatureId],
) -> Result<LayerFeatures> {
    stack.validate()?;
    params.validate()?;
    let (w, h) = stack.dims();
    if mask.registration.dims() != (w, h) {
        return Err(Error::Dimensions {
            expected: mask.registration.dims(),
            actual: (w, h),
        });
    }
    let layer = stack.layer;
    let wants = |f: FeatureId| selected.contains(&f);
    let crop = crop_box(mask, params, w, h);
    let local = crop_stack(stack, crop)?;
    let conv = Converters::new(profile)?;
    let th = params.thresholds(profile)?;

    let mut maps = Vec::new();
    let first_active = first_active_frame(&local, th.activity);
    let mut prescan = 0;
    if wants(FeatureId::Interpass) || wants(FeatureId::InterpassLaplacian) {
        let (ip, k) = interpass(&local, &conv, th.activity, params.prescan_frames)?;
        prescan = k;
        if wants(FeatureId::InterpassLaplacian) {
            maps.push(interpass_laplacian(&ip, params.laplacian_sigma)?);
        }
        maps.push(ip);
    }
    let (heat, order) = heat_intensity_and_scan_order(&local, th.activity)?;
    let scanned_pixels = order.valid_count();
    let mut spatters = Vec::new();
    if wants(FeatureId::SpatterGeneration) || wants(FeatureId::SpatterLanding) {
        let sp = spatter_layer(&local, &order, &conv, params)?;
        maps.push(sp.generation);
        maps.push(sp.landing);
        spatters = sp.records;
    }
    if wants(FeatureId::LocalPredeposition) {
        maps.push(local_predeposition(&local, &order, params.offset_frames, &conv.powder)?);
    }
    if wants(FeatureId::MaxPredeposition) {
        maps.push(max_predeposition(&local, &order, params.offset_frames, &conv.powder)?);
    }
    if wants(FeatureId::MeltPoolArea) {
        maps.push(melt_pool_area(&local, &order, th.melt)?);
    }
    if wants(FeatureId::CoolingRate) {
        maps.push(cooling_rate(&local, &order, params.cooling_window, &conv.printed)?);
    }
    if wants(FeatureId::AsprintedLaplacian) {
        maps.push(asprinted_laplacian(&local, params.laplacian_sigma, &conv)?);
    }
    if wants(FeatureId::HeatIntensity) {
        maps.push(heat);
    }
    if wants(FeatureId::ScanOrder) {
        maps.push(order);
    }
    maps.retain(|m| wants(m.feature));
    maps.sort_by_key(|m| m.feature);

    let keep = mask.to_bitmap();
    let mut full = Vec::with_capacity(maps.len());
    for m in maps {
        let mut e = m.embed(crop[0], crop[1], w, h)?;
        e.restrict(&keep);
        full.push(e);
    }
    for s in &mut spatters {
        s.translate(crop[0], crop[1]);
    }
    let summary = LayerSummary {
        layer,
        frames: stack.len(),
        first_active_frame: first_active,
        prescan_frames: prescan,
        scanned_pixels,
        part_pixels: mask.len(),
        spatter_count: spatters.len(),
        crop,
    };
    Ok(LayerFeatures {
        maps: full,
        spatters,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        for f in FeatureId::ALL {
            assert_eq!(FeatureId::from_code(f.code()), Some(f));
            assert_eq!(f.name().parse::<FeatureId>().unwrap(), f);
        }
        assert_eq!(FeatureId::from_code(11), None);
        assert!("heat".parse::<FeatureId>().is_err());
    }

    #[test]
    fn feature_lists() {
        let l = parse_feature_list("scan_order, interpass,scan_order").unwrap();
        assert_eq!(l, vec![FeatureId::Interpass, FeatureId::ScanOrder]);
        assert!(parse_feature_list(" , ").is_err());
    }

    #[test]
    fn params_toml_defaults() {
        let p: FeatureParams = toml::from_str("offset_frames = 5").unwrap();
        assert_eq!(p.offset_frames, 5);
        assert_eq!(p.cooling_window, 30);
        p.validate().unwrap();
        assert!(toml::from_str::<FeatureParams>("bogus = 1").is_err());
        let bad = FeatureParams {
            mask_sigma: 0.0,
            ..FeatureParams::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn thresholds_follow_profile() {
        let p = CalibrationProfile::default();
        let t = FeatureParams::default().thresholds(&p).unwrap();
        assert!(t.activity > t.melt);
        let fixed = FeatureParams {
            activity_threshold: Some(1234.0),
            ..FeatureParams::default()
        };
        assert_eq!(fixed.thresholds(&p).unwrap().activity, 1234.0);
    }

    #[test]
    fn restrict_and_embed() {
        let mut m = FeatureMap::from_grid(FeatureId::Interpass, 0, Grid2D::filled(2, 2, 1.0).unwrap());
        m.restrict(&[true, false, false, true]);
        assert_eq!(m.valid_count(), 2);
        assert_eq!(m.get(1, 0), None);
        let e = m.embed(1, 1, 4, 4).unwrap();
        assert_eq!(e.get(1, 1), Some(1.0));
        assert_eq!(e.get(0, 0), None);
        assert_eq!(e.valid_count(), 2);
    }
}
