//! Regular cell-centered grids on axis-aligned boxes.

use serde::{Deserialize, Serialize};

/// Cell-centered grid: axis `i` is split into `shape[i]` equal cells over
/// `[lo[i], hi[i]]`. Flat indices are row-major (last axis fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub shape: Vec<usize>,
}

impl GridSpec {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, shape: Vec<usize>) -> GridSpec {
        assert_eq!(lo.len(), hi.len());
        assert_eq!(lo.len(), shape.len());
        assert!(shape.iter().all(|&s| s > 0), "empty grid axis");
        assert!(
            lo.iter().zip(&hi).all(|(a, b)| a < b),
            "grid box must have positive extent"
        );
        GridSpec { lo, hi, shape }
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn num_cells(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / self.shape[axis] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }

    /// Row-major strides: stride of the last axis is 1.
    pub fn strides(&self) -> Vec<usize> {
        let d = self.dim();
        let mut s = vec![1usize; d];
        for a in (0..d.saturating_sub(1)).rev() {
            s[a] = s[a + 1] * self.shape[a + 1];
        }
        s
    }

    /// Stack-allocated strides for hot loops (dims beyond the first
    /// `dim()` entries are unused).
    pub fn strides_arr(&self) -> [usize; 8] {
        let d = self.dim();
        let mut s = [1usize; 8];
        for a in (0..d.saturating_sub(1)).rev() {
            s[a] = s[a + 1] * self.shape[a + 1];
        }
        s
    }

    /// Decompose a flat index without allocating.
    pub fn coords_into(&self, mut flat: usize, out: &mut [usize]) {
        let strides = self.strides_arr();
        for a in 0..self.dim() {
            out[a] = flat / strides[a];
            flat %= strides[a];
        }
    }

    /// Cell center without allocating.
    pub fn center_into(&self, flat: usize, out: &mut [f64]) {
        let strides = self.strides_arr();
        let mut rem = flat;
        for a in 0..self.dim() {
            let c = rem / strides[a];
            rem %= strides[a];
            out[a] = self.lo[a] + (c as f64 + 0.5) * self.spacing(a);
        }
    }

    pub fn flat_index(&self, coords: &[usize]) -> usize {
        let strides = self.strides();
        coords.iter().zip(&strides).map(|(c, s)| c * s).sum()
    }

    pub fn coords(&self, mut flat: usize) -> Vec<usize> {
        let strides = self.strides();
        strides
            .iter()
            .map(|s| {
                let c = flat / s;
                flat %= s;
                c
            })
            .collect()
    }

    pub fn center_of_coords(&self, coords: &[usize]) -> Vec<f64> {
        coords
            .iter()
            .enumerate()
            .map(|(a, &c)| self.lo[a] + (c as f64 + 0.5) * self.spacing(a))
            .collect()
    }

    pub fn center(&self, flat: usize) -> Vec<f64> {
        self.center_of_coords(&self.coords(flat))
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (lo, hi))| v >= lo && v <= hi)
    }

    /// How many cell-widths the point lies outside the box (0 if inside),
    /// maximized over axes. Used for the "outside by more than one cell"
    /// escape flag in the simulators.
    pub fn exit_distance_cells(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0_f64;
        for a in 0..self.dim() {
            let d = self.spacing(a);
            let below = (self.lo[a] - x[a]) / d;
            let above = (x[a] - self.hi[a]) / d;
            worst = worst.max(below).max(above);
        }
        worst
    }

    /// Multilinear interpolation of cell-centered `values` at `x`, with
    /// clamping to the outermost centers (nearest-value extrapolation
    /// outside the box).
    pub fn interp(&self, values: &[f64], x: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.num_cells());
        let d = self.dim();
        let strides = self.strides();
        // per-axis: lower cell index and fractional weight
        let mut base = [0usize; 8];
        let mut frac = [0.0f64; 8];
        assert!(d <= 8, "interpolation supports up to 8 axes");
        for a in 0..d {
            let h = self.spacing(a);
            let t = (x[a] - self.lo[a]) / h - 0.5; // cell-center coordinate
            let max_idx = self.shape[a] - 1;
            let tf = t.clamp(0.0, max_idx as f64);
            let i0 = (tf.floor() as usize).min(max_idx.saturating_sub(1).max(0));
            base[a] = i0;
            frac[a] = if self.shape[a] == 1 {
                0.0
            } else {
                (tf - i0 as f64).clamp(0.0, 1.0)
            };
        }
        let mut acc = 0.0;
        for corner in 0..1usize << d {
            let mut idx = 0usize;
            let mut w = 1.0;
            for a in 0..d {
                let up = corner >> a & 1 == 1;
                let i = if up {
                    (base[a] + 1).min(self.shape[a] - 1)
                } else {
                    base[a]
                };
                idx += i * strides[a];
                w *= if up { frac[a] } else { 1.0 - frac[a] };
            }
            acc += w * values[idx];
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip() {
        let g = GridSpec::new(vec![0.0, 0.0], vec![1.0, 2.0], vec![4, 6]);
        assert_eq!(g.num_cells(), 24);
        for flat in 0..24 {
            assert_eq!(g.flat_index(&g.coords(flat)), flat);
        }
        assert_eq!(g.strides(), vec![6, 1]);
    }

    #[test]
    fn centers_and_volume() {
        let g = GridSpec::new(vec![-1.0], vec![1.0], vec![4]);
        assert_eq!(g.spacing(0), 0.5);
        assert_eq!(g.center(0), vec![-0.75]);
        assert_eq!(g.center(3), vec![0.75]);
        assert!((g.cell_volume() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn interp_reproduces_linear_functions() {
        let g = GridSpec::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![10, 10]);
        let values: Vec<f64> = (0..g.num_cells())
            .map(|i| {
                let c = g.center(i);
                2.0 * c[0] - 3.0 * c[1] + 0.5
            })
            .collect();
        for p in [[0.31, 0.62], [0.5, 0.5], [0.05, 0.95]] {
            let exact = 2.0 * p[0] - 3.0 * p[1] + 0.5;
            assert!((g.interp(&values, &p) - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn interp_clamps_outside() {
        let g = GridSpec::new(vec![0.0], vec![1.0], vec![4]);
        let values = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(g.interp(&values, &[-5.0]), 1.0);
        assert_eq!(g.interp(&values, &[5.0]), 4.0);
    }

    #[test]
    fn exit_distance() {
        let g = GridSpec::new(vec![0.0], vec![1.0], vec![10]);
        assert_eq!(g.exit_distance_cells(&[0.5]), 0.0);
        assert!((g.exit_distance_cells(&[1.25]) - 2.5).abs() < 1e-12);
    }
}
