//! Counts ↔ temperature conversion with per-surface emissivity and a viewport
//! window term, plus fitting of emissivity and window transmission from
//! calibration measurements.
//!
//! The measurement equation is
//!
//! ```text
//! counts = τ·[ε·S(T_obj) + (1−ε)·S(T_refl)] + (1−τ)·S(T_win)
//! ```
//!
//! where `S` is a Sakuma–Hattori band-radiance curve
//! `S(T) = C / (exp(c2 / (A·T + B)) − 1)` with `T` in kelvin. Both window and
//! reflected terms use the configured ambient temperature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{Grid, Grid2D};

/// Second radiation constant in µm·K.
pub const C2: f64 = 14388.0;
pub const KELVIN_OFFSET: f64 = 273.15;
/// Temperature written to pixels whose counts fall below the background floor.
pub const FLOOR_SENTINEL_C: f64 = -KELVIN_OFFSET;

pub const DEFAULT_EMISSIVITY_POWDER: f64 = 0.63;
pub const DEFAULT_EMISSIVITY_PRINTED: f64 = 0.21;
pub const DEFAULT_WINDOW_TRANSMISSION: f64 = 0.75;

/// Band-radiance curve `S(T)`; see the module docs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadianceModel {
    /// Effective wavelength, µm.
    #[serde(rename = "model_a")]
    pub a: f64,
    /// Band offset, µm·K.
    #[serde(rename = "model_b")]
    pub b: f64,
    /// Gain, counts.
    #[serde(rename = "model_c")]
    pub c: f64,
}

impl Default for RadianceModel {
    /// Long-wave band (≈10 µm) scaled so 2000 °C at unit emissivity stays
    /// inside a 16-bit count range.
    fn default() -> Self {
        RadianceModel {
            a: 10.0,
            b: 100.0,
            c: 50_000.0,
        }
    }
}

impl RadianceModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.c > 0.0 && self.b.is_finite() && self.b > -self.a * 1.0) {
            return Err(Error::Parameter(format!(
                "radiance model needs A > 0, C > 0 and A·T + B > 0 for T > 0 K, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Signal for a blackbody at `t_c` °C.
    #[inline]
    pub fn signal(&self, t_c: f64) -> f64 {
        let t_k = t_c + KELVIN_OFFSET;
        if t_k <= 0.0 {
            return 0.0;
        }
        self.c / ((C2 / (self.a * t_k + self.b)).exp_m1())
    }

    /// Inverse of [`signal`](Self::signal); `s` must be positive.
    #[inline]
    pub fn temperature(&self, s: f64) -> f64 {
        let t_k = (C2 / (self.c / s).ln_1p() - self.b) / self.a;
        t_k - KELVIN_OFFSET
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationProfile {
    #[serde(default = "default_powder")]
    pub emissivity_powder: f64,
    #[serde(default = "default_printed")]
    pub emissivity_printed: f64,
    #[serde(default = "default_window")]
    pub window_transmission: f64,
    #[serde(default = "default_ambient", rename = "reflected_temperature_c")]
    pub reflected_temperature: f64,
    #[serde(flatten)]
    pub model: RadianceModel,
}

fn default_powder() -> f64 {
    DEFAULT_EMISSIVITY_POWDER
}
fn default_printed() -> f64 {
    DEFAULT_EMISSIVITY_PRINTED
}
fn default_window() -> f64 {
    DEFAULT_WINDOW_TRANSMISSION
}
fn default_ambient() -> f64 {
    25.0
}

impl Default for CalibrationProfile {
    fn default() -> Self {
        CalibrationProfile {
            emissivity_powder: DEFAULT_EMISSIVITY_POWDER,
            emissivity_printed: DEFAULT_EMISSIVITY_PRINTED,
            window_transmission: DEFAULT_WINDOW_TRANSMISSION,
            reflected_temperature: default_ambient(),
            model: RadianceModel::default(),
        }
    }
}

fn check_unit_interval(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::Parameter(format!("{name} must be in (0, 1], got {v}")));
    }
    Ok(())
}

impl CalibrationProfile {
    pub fn validate(&self) -> Result<()> {
        check_unit_interval("emissivity_powder", self.emissivity_powder)?;
        check_unit_interval("emissivity_printed", self.emissivity_printed)?;
        check_unit_interval("window_transmission", self.window_transmission)?;
        if !(self.reflected_temperature > FLOOR_SENTINEL_C) {
            return Err(Error::Parameter(format!(
                "reflected temperature {} °C below absolute zero",
                self.reflected_temperature
            )));
        }
        self.model.validate()
    }

    pub fn with_transmission(mut self, tau: f64) -> Self {
        self.window_transmission = tau;
        self
    }

    /// Counts contributed by everything except the object itself.
    pub fn background_floor(&self, eps: f64) -> f64 {
        let tau = self.window_transmission;
        let s_env = self.model.signal(self.reflected_temperature);
        tau * (1.0 - eps) * s_env + (1.0 - tau) * s_env
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("profile serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let p: CalibrationProfile =
            toml::from_str(text).map_err(|e| Error::Config(format!("calibration profile: {e}")))?;
        p.validate()?;
        Ok(p)
    }
}

/// Which emissivity a pixel uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SurfaceClass {
    Powder,
    AsPrinted,
    Unity,
    Custom(f64),
}

impl SurfaceClass {
    pub fn emissivity(self, profile: &CalibrationProfile) -> f64 {
        match self {
            SurfaceClass::Powder => profile.emissivity_powder,
            SurfaceClass::AsPrinted => profile.emissivity_printed,
            SurfaceClass::Unity => 1.0,
            SurfaceClass::Custom(e) => e,
        }
    }
}

/// Camera counts for an object at `t_obj` °C seen through the window.
pub fn forward_counts(t_obj: f64, eps: f64, profile: &CalibrationProfile) -> Result<f64> {
    check_unit_interval("emissivity", eps)?;
    check_unit_interval("window transmission", profile.window_transmission)?;
    if !(t_obj > FLOOR_SENTINEL_C) {
        return Err(Error::Parameter(format!("temperature {t_obj} °C below absolute zero")));
    }
    Ok(forward_unchecked(t_obj, eps, profile))
}

#[inline]
pub(crate) fn forward_unchecked(t_obj: f64, eps: f64, profile: &CalibrationProfile) -> f64 {
    let tau = profile.window_transmission;
    tau * eps * profile.model.signal(t_obj) + profile.background_floor(eps)
}

/// Object temperature (°C) that produces `counts`.
pub fn invert_counts(counts: f64, eps: f64, profile: &CalibrationProfile) -> Result<f64> {
    check_unit_interval("emissivity", eps)?;
    check_unit_interval("window transmission", profile.window_transmission)?;
    let floor = profile.background_floor(eps);
    if !(counts > floor) {
        return Err(Error::BelowFloor {
            counts,
            floor,
            emissivity: eps,
        });
    }
    let s_obj = (counts - floor) / (profile.window_transmission * eps);
    Ok(profile.model.temperature(s_obj))
}

/// Result of a one-parameter calibration fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitResult {
    pub value: f64,
    /// Standard deviation of the temperature residuals at `value`, °C.
    pub residual_std_c: f64,
}

const FIT_LOWER: f64 = 1e-3;
const FIT_TOLERANCE: f64 = 1e-4;

/// Golden-section minimization on `[lo, hi]`; endpoints are also evaluated
/// so a minimum on the boundary is returned exactly.
fn golden_section(lo: f64, hi: f64, tol: f64, f: impl Fn(f64) -> f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    [(mid, f(mid)), (lo, f(lo)), (hi, f(hi))]
        .into_iter()
        .fold((mid, f64::INFINITY), |best, cand| if cand.1 < best.1 { cand } else { best })
        .0
}

fn inverted_or_floor(counts: f64, eps: f64, profile: &CalibrationProfile) -> f64 {
    invert_counts(counts, eps, profile).unwrap_or(FLOOR_SENTINEL_C)
}

fn std_dev(residuals: impl Iterator<Item = f64>) -> f64 {
    let r: Vec<f64> = residuals.collect();
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
}

fn check_reference_span(temps: impl Iterator<Item = f64>, n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Parameter(format!("need at least 2 samples, got {n}")));
    }
    let (lo, hi) = temps.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
        (lo.min(t), hi.max(t))
    });
    if hi - lo < 100.0 {
        return Err(Error::IllConditioned(format!(
            "reference temperatures span {:.1} °C, need at least 100 °C",
            hi - lo
        )));
    }
    Ok(())
}

fn check_sample(counts: f64, t_ref: f64) -> Result<()> {
    if !counts.is_finite() || counts <= 0.0 || !t_ref.is_finite() || t_ref <= FLOOR_SENTINEL_C {
        return Err(Error::Parameter(format!(
            "calibration sample out of range: counts {counts}, reference {t_ref} °C"
        )));
    }
    Ok(())
}

/// Emissivity minimizing the squared error between inverted and reference
/// temperatures, using the profile's window transmission.
pub fn fit_emissivity(samples: &[(f64, f64)], profile: &CalibrationProfile) -> Result<FitResult> {
    profile.validate()?;
    for &(c, t) in samples {
        check_sample(c, t)?;
    }
    check_reference_span(samples.iter().map(|s| s.1), samples.len())?;
    let cost = |eps: f64| -> f64 {
        samples
            .iter()
            .map(|&(c, t)| (inverted_or_floor(c, eps, profile) - t).powi(2))
            .sum()
    };
    let eps = golden_section(FIT_LOWER, 1.0, FIT_TOLERANCE, cost);
    let residual_std_c = std_dev(
        samples
            .iter()
            .map(|&(c, t)| inverted_or_floor(c, eps, profile) - t),
    );
    Ok(FitResult {
        value: eps,
        residual_std_c,
    })
}

/// Window transmission making temperatures inverted from through-window counts
/// agree with those from direct counts. Uses the powder emissivity.
pub fn fit_window_transmission(
    paired: &[(f64, f64, f64)],
    profile: &CalibrationProfile,
) -> Result<FitResult> {
    profile.validate()?;
    for &(cw, cwo, t) in paired {
        check_sample(cw, t)?;
        check_sample(cwo, t)?;
    }
    check_reference_span(paired.iter().map(|p| p.2), paired.len())?;
    let eps = profile.emissivity_powder;
    let direct = profile.with_transmission(1.0);
    let without: Vec<f64> = paired
        .iter()
        .map(|&(_, cwo, _)| inverted_or_floor(cwo, eps, &direct))
        .collect();
    let residuals = |tau: f64| {
        let p = profile.with_transmission(tau);
        paired
            .iter()
            .zip(&without)
            .map(move |(&(cw, _, _), &t0)| inverted_or_floor(cw, eps, &p) - t0)
    };
    let tau = golden_section(FIT_LOWER, 1.0, FIT_TOLERANCE, |tau| {
        residuals(tau).map(|r| r * r).sum()
    });
    Ok(FitResult {
        value: tau,
        residual_std_c: std_dev(residuals(tau)),
    })
}

/// Calibrated temperatures plus a per-pixel below-floor flag.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureFrame {
    pub temperature: Grid2D,
    pub below_floor: Grid<bool>,
}

impl TemperatureFrame {
    pub fn flagged_count(&self) -> usize {
        self.below_floor.values().iter().filter(|&&b| b).count()
    }
}

/// Lookup table from 16-bit counts to °C for one emissivity.
#[derive(Debug, Clone)]
pub struct CountsLut {
    temps: Vec<f64>,
}

impl CountsLut {
    pub fn new(eps: f64, profile: &CalibrationProfile) -> Result<Self> {
        check_unit_interval("emissivity", eps)?;
        profile.validate()?;
        let temps = (0..=u16::MAX as u32)
            .map(|c| invert_counts(c as f64, eps, profile).unwrap_or(f64::NAN))
            .collect();
        Ok(CountsLut { temps })
    }

    /// Temperature or `None` when below floor.
    #[inline]
    pub fn get(&self, counts: u16) -> Option<f64> {
        let t = self.temps[counts as usize];
        (!t.is_nan()).then_some(t)
    }

    /// Temperature, with below-floor counts mapped to [`FLOOR_SENTINEL_C`].
    #[inline]
    pub fn get_or_floor(&self, counts: u16) -> f64 {
        self.get(counts).unwrap_or(FLOOR_SENTINEL_C)
    }

    pub fn convert(&self, frame: &Grid<u16>) -> TemperatureFrame {
        let temperature = frame.map(|c| self.get_or_floor(c));
        let below_floor = frame.map(|c| self.get(c).is_none());
        TemperatureFrame {
            temperature,
            below_floor,
        }
    }
}

/// Per-pixel conversion using each pixel's surface class.
pub fn convert_frame(
    frame: &Grid<u16>,
    class_map: &Grid<SurfaceClass>,
    profile: &CalibrationProfile,
) -> Result<TemperatureFrame> {
    frame.ensure_same_dims(class_map)?;
    profile.validate()?;
    let (w, h) = frame.dims();
    let mut temps = Vec::with_capacity(w * h);
    let mut flags = Vec::with_capacity(w * h);
    for (&c, &class) in frame.values().iter().zip(class_map.values()) {
        match invert_counts(c as f64, class.emissivity(profile), profile) {
            Ok(t) => {
                temps.push(t);
                flags.push(false);
            }
            Err(Error::BelowFloor { .. }) => {
                temps.push(FLOOR_SENTINEL_C);
                flags.push(true);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TemperatureFrame {
        temperature: Grid2D::from_vec(w, h, temps)?,
        below_floor: Grid::from_vec(w, h, flags)?,
    })
}

/// Rounds float counts into the camera's 16-bit range.
#[inline]
pub fn quantize_counts(c: f64) -> u16 {
    c.round().clamp(0.0, u16::MAX as f64) as u16
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile() -> CalibrationProfile {
        CalibrationProfile::default()
    }

    #[test]
    fn defaults_match_calibrated_values() {
        let p = profile();
        assert_eq!(p.emissivity_powder, 0.63);
        assert_eq!(p.emissivity_printed, 0.21);
        assert_eq!(p.window_transmission, 0.75);
        p.validate().unwrap();
    }

    #[test]
    fn unity_emissivity_and_window_collapse_to_signal() {
        let p = profile().with_transmission(1.0);
        for t in [25.0, 300.0, 1200.0] {
            let c = forward_counts(t, 1.0, &p).unwrap();
            assert!((c - p.model.signal(t)).abs() <= 1e-9 * c);
        }
    }

    #[test]
    fn isothermal_enclosure_reads_true_signal() {
        let mut p = profile();
        p.reflected_temperature = 180.0;
        for (eps, tau) in [(0.21, 0.75), (0.63, 0.4), (1.0, 1.0)] {
            let c = forward_counts(180.0, eps, &p.with_transmission(tau)).unwrap();
            let s = p.model.signal(180.0);
            assert!((c - s).abs() < 1e-9 * s);
        }
    }

    #[test]
    fn counts_increase_with_temperature() {
        let p = profile();
        let c: Vec<f64> = [100.0, 300.0, 500.0]
            .iter()
            .map(|&t| forward_counts(t, 0.63, &p).unwrap())
            .collect();
        assert!(c[0] < c[1] && c[1] < c[2]);
    }

    #[test]
    fn invert_unit_case() {
        let p = profile().with_transmission(1.0);
        let t = invert_counts(p.model.signal(100.0), 1.0, &p).unwrap();
        assert!((t - 100.0).abs() < 0.01);
    }

    #[test]
    fn round_trip_grid() {
        for tau in [0.75, 1.0] {
            let p = profile().with_transmission(tau);
            for eps in [0.21, 0.63, 1.0] {
                for t in [25.0, 80.0, 300.0, 500.0, 660.0, 2000.0] {
                    let c = forward_counts(t, eps, &p).unwrap();
                    let back = invert_counts(c, eps, &p).unwrap();
                    assert!((back - t).abs() < 0.01, "{t} {eps} {tau} -> {back}");
                    let again = forward_counts(back, eps, &p).unwrap();
                    assert!((again - c).abs() <= 1e-6 * c);
                }
            }
        }
    }

    #[test]
    fn lower_emissivity_reads_hotter() {
        let p = profile();
        let c = forward_counts(400.0, 0.63, &p).unwrap();
        let t_powder = invert_counts(c, 0.63, &p).unwrap();
        let t_low = invert_counts(c, 0.21, &p).unwrap();
        assert!(t_low > t_powder + 50.0);
    }

    #[test]
    fn below_floor_and_bad_parameters() {
        let p = profile();
        let floor = p.background_floor(0.63);
        assert!(matches!(
            invert_counts(floor, 0.63, &p),
            Err(Error::BelowFloor { .. })
        ));
        assert!(forward_counts(100.0, 0.0, &p).is_err());
        assert!(forward_counts(100.0, 1.2, &p).is_err());
        assert!(forward_counts(100.0, 0.5, &p.with_transmission(0.0)).is_err());
        assert!(forward_counts(-300.0, 0.5, &p).is_err());
    }

    #[test]
    fn golden_section_hits_boundary_exactly() {
        assert_eq!(golden_section(0.0, 1.0, 1e-4, |x| -x), 1.0);
        let m = golden_section(0.0, 1.0, 1e-6, |x| (x - 0.3).powi(2));
        assert!((m - 0.3).abs() < 1e-5);
    }

    #[test]
    fn fit_emissivity_preconditions() {
        let p = profile();
        let one = [(1000.0, 100.0)];
        assert!(matches!(fit_emissivity(&one, &p), Err(Error::Parameter(_))));
        let flat = [(1000.0, 100.0), (1001.0, 100.0), (1002.0, 100.0)];
        assert!(matches!(fit_emissivity(&flat, &p), Err(Error::IllConditioned(_))));
        let bad = [(f64::NAN, 100.0), (2000.0, 300.0)];
        assert!(matches!(fit_emissivity(&bad, &p), Err(Error::Parameter(_))));
    }

    #[test]
    fn profile_round_trips_through_toml() {
        let mut p = profile();
        p.emissivity_printed = 0.3;
        let text = p.to_toml();
        for key in [
            "emissivity_powder",
            "emissivity_printed",
            "window_transmission",
            "reflected_temperature_c",
            "model_a",
            "model_b",
            "model_c",
        ] {
            assert!(text.contains(key), "{key} missing in {text}");
        }
        assert_eq!(CalibrationProfile::from_toml(&text).unwrap(), p);
        assert!(CalibrationProfile::from_toml("emissivity_powder = 1.5").is_err());
    }

    #[test]
    fn lut_matches_direct_inversion() {
        let p = profile();
        let lut = CountsLut::new(0.63, &p).unwrap();
        for c in [0u16, 500, 900, 1500, 20000, 65535] {
            match invert_counts(c as f64, 0.63, &p) {
                Ok(t) => assert_eq!(lut.get(c), Some(t)),
                Err(_) => assert_eq!(lut.get(c), None),
            }
        }
    }
}
