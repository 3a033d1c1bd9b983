use super::{scan_frame, Converters, FeatureId, FeatureMap, FeatureParams, Validity};
use crate::error::{Error, Result};
use crate::framestack::LayerStack;
use crate::imageops::{
    dilate, gaussian_gradient_magnitude, gaussian_laplace, label_mask, otsu_split, Connectivity, Grid, Grid2D,
    LabelGrid,
};

/// One counted spatter landing.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatterRecord {
    pub frame: usize,
    pub landing_pixels: Vec<(usize, usize)>,
    /// Response-weighted centroid (px).
    pub centroid: (f64, f64),
    pub size: usize,
    /// Laser-location pixels credited with generating this spatter.
    pub source_pixels: Vec<(usize, usize)>,
}

impl SpatterRecord {
    pub(crate) fn translate(&mut self, dx: usize, dy: usize) {
        for p in self.landing_pixels.iter_mut().chain(self.source_pixels.iter_mut()) {
            p.0 += dx;
            p.1 += dy;
        }
        self.centroid.0 += dx as f64;
        self.centroid.1 += dy as f64;
    }
}

#[derive(Debug, Clone)]
pub struct SpatterFrame {
    /// Melt pool and scanned track, dilated.
    pub scan_mask: Grid<bool>,
    pub candidates: LabelGrid,
    /// Negated LoG response the candidates were cut from.
    pub response: Grid2D,
    /// Response level candidates had to exceed.
    pub threshold: f64,
}

fn median(values: &mut [f64]) -> f64 {
    let mid = values.len() / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Spatter candidates in one temperature frame.
///
/// The scan mask is the upper Otsu class of the Gaussian gradient magnitude,
/// joined with `exclude` (pixels known to be scanned) and dilated. Candidates
/// are 8-connected clusters outside the mask where the negated LoG exceeds
/// its own Otsu split, `spatter_noise_k` robust noise deviations and the
/// absolute floor `spatter_min_response`.
pub fn spatter_frame_filter(temps: &Grid2D, exclude: Option<&[bool]>, params: &FeatureParams) -> Result<SpatterFrame> {
    let (w, h) = temps.dims();
    if let Some(e) = exclude {
        if e.len() != w * h {
            return Err(Error::Parameter(format!("exclusion mask has {} entries for {w}x{h}", e.len())));
        }
    }
    let grad = gaussian_gradient_magnitude(temps, params.mask_sigma)?;
    let response = gaussian_laplace(temps, params.blob_sigma)?.map(|v| -v);
    let empty = |response: Grid2D| -> Result<SpatterFrame> {
        Ok(SpatterFrame {
            scan_mask: Grid::filled(w, h, false)?,
            candidates: label_mask(&vec![false; w * h], w, h, Connectivity::Eight),
            response,
            threshold: f64::INFINITY,
        })
    };
    let split = match otsu_split(grad.values()) {
        Ok(s) => s,
        Err(Error::DegenerateHistogram) => return empty(response),
        Err(e) => return Err(e),
    };
    let mut mask: Vec<bool> = grad.values().iter().map(|&g| g >= split.threshold).collect();
    if let Some(e) = exclude {
        for (m, &x) in mask.iter_mut().zip(e) {
            *m |= x;
        }
    }
    let mask = dilate(&mask, w, h, params.dilation_radius);

    let mut outside: Vec<f64> = response
        .values()
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| !m)
        .map(|(&r, _)| r)
        .collect();
    let positive: Vec<f64> = outside.iter().copied().filter(|&r| r > 0.0).collect();
    if positive.is_empty() {
        let mut f = empty(response)?;
        f.scan_mask = Grid::from_vec(w, h, mask)?;
        return Ok(f);
    }
    let med = median(&mut outside);
    let mut dev: Vec<f64> = outside.iter().map(|r| (r - med).abs()).collect();
    let noise = 1.4826 * median(&mut dev);
    let otsu = match otsu_split(&positive) {
        Ok(s) => s.threshold,
        Err(Error::DegenerateHistogram) => positive[0],
        Err(e) => return Err(e),
    };
    let floor = (params.spatter_noise_k * noise).max(params.spatter_min_response);
    let threshold = otsu.max(floor);
    let fg: Vec<bool> = response
        .values()
        .iter()
        .zip(&mask)
        .map(|(&r, &m)| !m && r >= otsu && r > floor)
        .collect();
    Ok(SpatterFrame {
        scan_mask: Grid::from_vec(w, h, mask)?,
        candidates: label_mask(&fg, w, h, Connectivity::Eight),
        response,
        threshold,
    })
}

#[derive(Debug, Clone)]
pub struct SpatterLayer {
    pub generation: FeatureMap,
    pub landing: FeatureMap,
    pub records: Vec<SpatterRecord>,
}

impl SpatterLayer {
    /// Records credited to some laser location.
    pub fn credited(&self) -> usize {
        self.records.iter().filter(|r| !r.source_pixels.is_empty()).count()
    }
}

/// Counts spatter landings over a layer.
///
/// Each frame is converted with as-printed emissivity for pixels scanned in
/// earlier frames and powder emissivity elsewhere. A cluster that touches a
/// pixel of any previously counted cluster is the same spatter seen again and
/// only extends the registry. New clusters are credited to the pixels scanned
/// in that frame, or to the nearest scanned frame when none was.
pub fn spatter_layer(
    stack: &LayerStack,
    scan_order: &FeatureMap,
    conv: &Converters,
    params: &FeatureParams,
) -> Result<SpatterLayer> {
    let (w, h) = stack.dims();
    if scan_order.dims() != (w, h) {
        return Err(Error::Dimensions {
            expected: (w, h),
            actual: scan_order.dims(),
        });
    }
    let n = stack.len();
    let order: Vec<Option<usize>> = (0..w * h).map(|p| scan_frame(scan_order, p)).collect();
    let mut by_frame: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (p, s) in order.iter().enumerate() {
        if let Some(s) = s {
            by_frame[*s].push(p);
        }
    }
    let source_frame = |t: usize| -> Option<usize> {
        (0..=t.min(n - 1))
            .rev()
            .find(|&f| !by_frame[f].is_empty())
            .or_else(|| (t + 1..n).find(|&f| !by_frame[f].is_empty()))
    };

    let mut generation = FeatureMap::invalid(FeatureId::SpatterGeneration, stack.layer, w, h)?;
    for (p, s) in order.iter().enumerate() {
        if s.is_some() {
            generation.set(p % w, p / w, 0.0, Validity::Valid);
        }
    }
    let mut landing = FeatureMap::from_grid(FeatureId::SpatterLanding, stack.layer, Grid2D::filled(w, h, 0.0)?);
    let mut registry = vec![false; w * h];
    let mut records = Vec::new();
    let mut temps = Grid2D::filled(w, h, 0.0)?;
    let mut exclude = vec![false; w * h];

    for (t, frame) in stack.frames.iter().enumerate() {
        for (p, ((dst, ex), &c)) in temps
            .values_mut()
            .iter_mut()
            .zip(exclude.iter_mut())
            .zip(frame.values())
            .enumerate()
        {
            let (lut, scanned) = match order[p] {
                Some(s) if s < t => (&conv.printed, true),
                Some(s) => (&conv.powder, s == t),
                None => (&conv.powder, false),
            };
            *dst = conv.filtered(lut, c);
            *ex = scanned;
        }
        let sf = spatter_frame_filter(&temps, Some(&exclude), params)?;
        for cluster in sf.candidates.clusters() {
            let seen = cluster.iter().any(|&p| registry[p]);
            for &p in &cluster {
                registry[p] = true;
            }
            if seen {
                continue;
            }
            let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
            for &p in &cluster {
                let r = sf.response.values()[p];
                sx += r * (p % w) as f64;
                sy += r * (p / w) as f64;
                sw += r;
            }
            let source: Vec<usize> = source_frame(t).map(|f| by_frame[f].clone()).unwrap_or_default();
            for &p in &source {
                let v = generation.grid.values()[p];
                generation.set(p % w, p / w, v + 1.0, Validity::Valid);
            }
            for &p in &cluster {
                let v = landing.grid.values()[p];
                landing.set(p % w, p / w, v + 1.0, Validity::Valid);
            }
            records.push(SpatterRecord {
                frame: t,
                landing_pixels: cluster.iter().map(|&p| (p % w, p / w)).collect(),
                centroid: (sx / sw, sy / sw),
                size: cluster.len(),
                source_pixels: source.iter().map(|&p| (p % w, p / w)).collect(),
            });
        }
    }
    Ok(SpatterLayer {
        generation,
        landing,
        records,
    })
}
