use super::Grid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    pub fn from_neighbors(n: u8) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(Error::Parameter(format!("connectivity must be 4 or 8, got {other}"))),
        }
    }

    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
            Connectivity::Eight => &[
                (1, 0),
                (-1, 0),
                (0, 1),
                (0, -1),
                (1, 1),
                (1, -1),
                (-1, 1),
                (-1, -1),
            ],
        }
    }
}

/// Connected-component labels: 0 is background, clusters are `1..=count`
/// numbered in raster order of their first pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    pub labels: Grid<u32>,
    pub count: u32,
}

impl LabelGrid {
    /// Pixel indices of every cluster, indexed by `label - 1`.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count as usize];
        for (i, &l) in self.labels.values().iter().enumerate() {
            if l > 0 {
                out[l as usize - 1].push(i);
            }
        }
        out
    }
}

/// Labels clusters of nonzero pixels. Any value other than 0 or 1 is rejected.
pub fn label_components<T>(binary: &Grid<T>, connectivity: Connectivity) -> Result<LabelGrid>
where
    T: Copy + Into<f64>,
{
    let (w, h) = binary.dims();
    let mut fg = Vec::with_capacity(w * h);
    for (i, &v) in binary.values().iter().enumerate() {
        let v: f64 = v.into();
        if v == 0.0 {
            fg.push(false);
        } else if v == 1.0 {
            fg.push(true);
        } else {
            return Err(Error::Parameter(format!(
                "binary grid has value {v} at pixel ({}, {})",
                i % w,
                i / w
            )));
        }
    }
    Ok(label_mask(&fg, w, h, connectivity))
}

/// Labels `true` pixels of a row-major mask.
pub fn label_mask(fg: &[bool], w: usize, h: usize, connectivity: Connectivity) -> LabelGrid {
    let mut labels = vec![0u32; w * h];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !fg[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (x, y) = ((p % w) as isize, (p / w) as isize);
            for &(dx, dy) in connectivity.offsets() {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if fg[q] && labels[q] == 0 {
                    labels[q] = count;
                    stack.push(q);
                }
            }
        }
    }
    LabelGrid {
        labels: Grid::from_vec(w, h, labels).expect("dims checked by caller"),
        count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_grid_has_no_labels() {
        let g = Grid::filled(6, 4, 0u8).unwrap();
        assert_eq!(label_components(&g, Connectivity::Eight).unwrap().count, 0);
    }

    #[test]
    fn diagonal_pixels_depend_on_connectivity() {
        let mut g = Grid::filled(3, 3, 0u8).unwrap();
        g.set(0, 0, 1);
        g.set(1, 1, 1);
        assert_eq!(label_components(&g, Connectivity::Four).unwrap().count, 2);
        assert_eq!(label_components(&g, Connectivity::Eight).unwrap().count, 1);
    }

    #[test]
    fn rejects_non_binary() {
        let mut g = Grid::filled(3, 3, 0.0f64).unwrap();
        g.set(2, 1, 0.5);
        assert!(label_components(&g, Connectivity::Four).is_err());
        assert!(Connectivity::from_neighbors(6).is_err());
    }

    #[test]
    fn labels_are_contiguous_in_raster_order() {
        let g = Grid::from_vec(5, 1, vec![1u8, 0, 1, 0, 1]).unwrap();
        let l = label_components(&g, Connectivity::Four).unwrap();
        assert_eq!(l.labels.values(), &[1, 0, 2, 0, 3]);
        assert_eq!(l.clusters(), vec![vec![0], vec![2], vec![4]]);
    }
}
