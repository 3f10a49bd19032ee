//! Regular R×R height grids over the normalized ground plane, with a
//! validity mask for cells lacking observations.

/// Heights are normalized z values; `valid` marks cells that carry data.
/// Cell (u, v) covers the square centered at
/// `x = -1 + (u + 0.5) * 2/res`, `y = -1 + (v + 0.5) * 2/res`.
#[derive(Debug, Clone)]
pub struct HeightMap {
    pub res: usize,
    /// Row-major, index `v * res + u`.
    pub heights: Vec<f64>,
    pub valid: Vec<bool>,
}

impl HeightMap {
    pub fn new_invalid(res: usize) -> Self {
        HeightMap {
            res,
            heights: vec![0.0; res * res],
            valid: vec![false; res * res],
        }
    }

    pub fn new_filled(res: usize, h: f64) -> Self {
        HeightMap {
            res,
            heights: vec![h; res * res],
            valid: vec![true; res * res],
        }
    }

    #[inline]
    pub fn idx(&self, u: usize, v: usize) -> usize {
        v * self.res + u
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.heights[v * self.res + u]
    }

    #[inline]
    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.valid[v * self.res + u]
    }

    /// Normalized x coordinate of the cell-center column `u`.
    #[inline]
    pub fn coord(&self, u: usize) -> f64 {
        -1.0 + (u as f64 + 0.5) * 2.0 / self.res as f64
    }

    /// Cell index containing normalized coordinate `x`, clamped in range.
    #[inline]
    pub fn cell_of(&self, x: f64) -> usize {
        let u = ((x + 1.0) * 0.5 * self.res as f64).floor() as i64;
        u.clamp(0, self.res as i64 - 1) as usize
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_count() as f64 / (self.res * self.res) as f64
    }

    /// Minimum height over valid cells, `None` when nothing is valid.
    pub fn min_valid_height(&self) -> Option<f64> {
        let mut min = None;
        for i in 0..self.heights.len() {
            if self.valid[i] {
                min = Some(match min {
                    None => self.heights[i],
                    Some(m) if self.heights[i] < m => self.heights[i],
                    Some(m) => m,
                });
            }
        }
        min
    }
}
