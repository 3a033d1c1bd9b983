use super::{scan_frame, Converters, FeatureId, FeatureMap, Validity};
use crate::error::{Error, Result};
use crate::framestack::LayerStack;
use crate::imageops::{gaussian_laplace, Grid2D, ReductionState};
use crate::radiometry::CountsLut;

/// First frame with any pixel above the activity threshold.
pub fn first_active_frame(stack: &LayerStack, activity: f64) -> Option<usize> {
    stack
        .frames
        .iter()
        .position(|f| f.values().iter().any(|&c| c as f64 > activity))
}

/// Mean powder-emissivity temperature of the frames before the laser starts,
/// using at most `max_frames` of them. Returns the map and the number of
/// frames averaged.
pub fn interpass(stack: &LayerStack, conv: &Converters, activity: f64, max_frames: usize) -> Result<(FeatureMap, usize)> {
    let first = first_active_frame(stack, activity);
    if first == Some(0) {
        return Err(Error::NoPrescan { layer: stack.layer });
    }
    let k = first.unwrap_or(stack.len()).min(max_frames).max(1);
    let (w, h) = stack.dims();
    let mut out = FeatureMap::invalid(FeatureId::Interpass, stack.layer, w, h)?;
    for y in 0..h {
        for x in 0..w {
            let (mut sum, mut n) = (0.0, 0);
            for f in &stack.frames[..k] {
                if let Some(t) = conv.powder.get(f.get(x, y)) {
                    sum += t;
                    n += 1;
                }
            }
            if n > 0 {
                out.set(x, y, sum / n as f64, Validity::Valid);
            }
        }
    }
    Ok((out, k))
}

/// Per-pixel peak raw counts and the frame of first attainment. Pixels never
/// above the activity threshold are invalid in both maps.
pub fn heat_intensity_and_scan_order(stack: &LayerStack, activity: f64) -> Result<(FeatureMap, FeatureMap)> {
    let (w, h) = stack.dims();
    let mut state = ReductionState::new(w, h)?;
    for (i, f) in stack.frames.iter().enumerate() {
        state.fold(f, i as i64)?;
    }
    let mut heat = FeatureMap::invalid(FeatureId::HeatIntensity, stack.layer, w, h)?;
    let mut order = FeatureMap::invalid(FeatureId::ScanOrder, stack.layer, w, h)?;
    for y in 0..h {
        for x in 0..w {
            let peak = state.max_value.get(x, y);
            if peak > activity {
                heat.set(x, y, peak, Validity::Valid);
                order.set(x, y, state.argmax_frame.get(x, y) as f64, Validity::Valid);
            }
        }
    }
    Ok((heat, order))
}

fn check_order(stack: &LayerStack, scan_order: &FeatureMap) -> Result<()> {
    if scan_order.dims() != stack.dims() {
        return Err(Error::Dimensions {
            expected: stack.dims(),
            actual: scan_order.dims(),
        });
    }
    Ok(())
}

/// Powder temperature `offset` frames before each pixel's scan frame. Pixels
/// scanned earlier than `offset` take frame 0 and are flagged clamped.
pub fn local_predeposition(
    stack: &LayerStack,
    scan_order: &FeatureMap,
    offset: usize,
    powder: &CountsLut,
) -> Result<FeatureMap> {
    check_order(stack, scan_order)?;
    let (w, h) = stack.dims();
    let mut out = FeatureMap::invalid(FeatureId::LocalPredeposition, stack.layer, w, h)?;
    for y in 0..h {
        for x in 0..w {
            let Some(s) = scan_frame(scan_order, y * w + x) else { continue };
            let (frame, flag) = if s >= offset { (s - offset, Validity::Valid) } else { (0, Validity::Clamped) };
            if let Some(t) = powder.get(stack.frames[frame].get(x, y)) {
                out.set(x, y, t, flag);
            }
        }
    }
    Ok(out)
}

/// Peak powder temperature over frames `0..=s−offset` for each pixel scanned
/// at frame `s`. The table is monotone in counts, so the running maximum is
/// taken on raw counts and converted once.
pub fn max_predeposition(
    stack: &LayerStack,
    scan_order: &FeatureMap,
    offset: usize,
    powder: &CountsLut,
) -> Result<FeatureMap> {
    check_order(stack, scan_order)?;
    let (w, h) = stack.dims();
    let n = stack.len();
    // Pixels grouped by the last frame of their window.
    let mut due: Vec<Vec<usize>> = vec![Vec::new(); n];
    for p in 0..w * h {
        if let Some(s) = scan_frame(scan_order, p) {
            due[s.saturating_sub(offset).min(n - 1)].push(p);
        }
    }
    let mut out = FeatureMap::invalid(FeatureId::MaxPredeposition, stack.layer, w, h)?;
    let mut running = vec![0u16; w * h];
    let last_due = due.iter().rposition(|d| !d.is_empty());
    for (f, frame) in stack.frames.iter().enumerate().take(last_due.map_or(0, |l| l + 1)) {
        for (r, &c) in running.iter_mut().zip(frame.values()) {
            *r = (*r).max(c);
        }
        for &p in &due[f] {
            let s = scan_frame(scan_order, p).unwrap_or(0);
            let flag = if s >= offset { Validity::Valid } else { Validity::Clamped };
            if let Some(t) = powder.get(running[p]) {
                out.set(p % w, p / w, t, flag);
            }
        }
    }
    Ok(out)
}

/// Pixels above the melt threshold in each frame, written to the pixels
/// scanned in that frame.
pub fn melt_pool_area(stack: &LayerStack, scan_order: &FeatureMap, threshold: f64) -> Result<FeatureMap> {
    check_order(stack, scan_order)?;
    let (w, h) = stack.dims();
    let areas: Vec<usize> = stack
        .frames
        .iter()
        .map(|f| f.values().iter().filter(|&&c| c as f64 > threshold).count())
        .collect();
    let mut out = FeatureMap::invalid(FeatureId::MeltPoolArea, stack.layer, w, h)?;
    for p in 0..w * h {
        if let Some(s) = scan_frame(scan_order, p) {
            out.set(p % w, p / w, areas[s] as f64, Validity::Valid);
        }
    }
    Ok(out)
}

/// `(T[s] − T[s+window])·fps/window` with as-printed emissivity. Windows that
/// run past the last frame are invalid.
pub fn cooling_rate(stack: &LayerStack, scan_order: &FeatureMap, window: usize, printed: &CountsLut) -> Result<FeatureMap> {
    check_order(stack, scan_order)?;
    if window == 0 {
        return Err(Error::Parameter("cooling window must be at least one frame".into()));
    }
    let (w, h) = stack.dims();
    let mut out = FeatureMap::invalid(FeatureId::CoolingRate, stack.layer, w, h)?;
    for p in 0..w * h {
        let Some(s) = scan_frame(scan_order, p) else { continue };
        let Some(later) = stack.frames.get(s + window) else { continue };
        let (x, y) = (p % w, p / w);
        if let (Some(t0), Some(t1)) = (printed.get(stack.frames[s].get(x, y)), printed.get(later.get(x, y))) {
            out.set(x, y, (t0 - t1) * stack.fps / window as f64, Validity::Valid);
        }
    }
    Ok(out)
}

/// Laplacian of Gaussian of the interpass map. Invalid pixels are filled with
/// the mean of the valid ones before filtering and stay invalid.
pub fn interpass_laplacian(interpass: &FeatureMap, sigma: f64) -> Result<FeatureMap> {
    let valid = interpass.valid_values();
    let (w, h) = interpass.dims();
    let mut out = FeatureMap::invalid(FeatureId::InterpassLaplacian, interpass.layer, w, h)?;
    if valid.is_empty() {
        return Ok(out);
    }
    let mean = valid.iter().sum::<f64>() / valid.len() as f64;
    let filled = Grid2D::from_fn(w, h, |x, y| interpass.get(x, y).unwrap_or(mean))?;
    let log = gaussian_laplace(&filled, sigma)?;
    for y in 0..h {
        for x in 0..w {
            if interpass.validity.get(x, y).is_usable() {
                out.set(x, y, log.get(x, y), Validity::Valid);
            }
        }
    }
    Ok(out)
}

/// Laplacian of Gaussian of the last frame read as an as-printed surface.
pub fn asprinted_laplacian(stack: &LayerStack, sigma: f64, conv: &Converters) -> Result<FeatureMap> {
    let last = stack.frames.last().expect("validated stack is nonempty");
    let temps = last.map(|c| conv.filtered(&conv.printed, c));
    asprinted_laplacian_from_temperature(&temps, stack.layer, sigma)
}

/// As-printed Laplacian of an already converted temperature field.
pub fn asprinted_laplacian_from_temperature(temps: &Grid2D, layer: usize, sigma: f64) -> Result<FeatureMap> {
    Ok(FeatureMap::from_grid(
        FeatureId::AsprintedLaplacian,
        layer,
        gaussian_laplace(temps, sigma)?,
    ))
}
