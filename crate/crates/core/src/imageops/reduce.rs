use super::{Grid, Grid2D};
use crate::error::{Error, Result};

/// Sentinel in `argmax_frame` for pixels never strictly exceeded.
pub const NEVER_UPDATED: i64 = -1;

/// Running per-pixel maximum and the frame index that first attained it.
#[derive(Debug, Clone)]
pub struct ReductionState {
    pub max_value: Grid2D,
    pub argmax_frame: Grid<i64>,
    last_index: Option<i64>,
}

impl ReductionState {
    /// Empty state: every pixel starts at −∞ so the first fold always wins.
    pub fn new(width: usize, height: usize) -> Result<Self> {
        Ok(ReductionState {
            max_value: Grid2D::filled(width, height, f64::NEG_INFINITY)?,
            argmax_frame: Grid::filled(width, height, NEVER_UPDATED)?,
            last_index: None,
        })
    }

    pub fn last_index(&self) -> Option<i64> {
        self.last_index
    }

    /// Folds one frame in. A pixel is updated only when the new value is
    /// strictly greater, so plateaus keep the earliest frame.
    pub fn fold<T>(&mut self, frame: &Grid<T>, frame_idx: i64) -> Result<()>
    where
        T: Copy + Into<f64>,
    {
        self.max_value.ensure_same_dims(frame)?;
        if let Some(last) = self.last_index {
            if frame_idx <= last {
                return Err(Error::Parameter(format!(
                    "frame index {frame_idx} not after previously folded {last}"
                )));
            }
        }
        let maxes = self.max_value.values_mut();
        let args = self.argmax_frame.values_mut();
        for ((m, a), &v) in maxes.iter_mut().zip(args.iter_mut()).zip(frame.values()) {
            let v: f64 = v.into();
            if v > *m {
                *m = v;
                *a = frame_idx;
            }
        }
        self.last_index = Some(frame_idx);
        Ok(())
    }
}

/// Functional form of [`ReductionState::fold`].
pub fn fold_max_argmax<T>(mut state: ReductionState, frame: &Grid<T>, frame_idx: i64) -> Result<ReductionState>
where
    T: Copy + Into<f64>,
{
    state.fold(frame, frame_idx)?;
    Ok(state)
}
