//! Structured grids on boxes with per-axis periodicity.
//!
//! Periodic axes carry `dims[i]` nodes at spacing `period/dims[i]` (the
//! right endpoint is identified with the left one); bounded axes carry
//! `dims[i]` nodes including both endpoints at spacing `period/(dims[i]-1)`.
//! Linear node indices are row-major with the last axis fastest.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dims: Vec<usize>,
    extents: Vec<f64>,
    periodic: Vec<bool>,
    strides: Vec<usize>,
    len: usize,
}

impl Grid {
    /// Fully periodic grid (torus) with the given axis extents.
    pub fn torus(dims: &[usize], extents: &[f64]) -> Self {
        Self::new(dims, extents, &vec![true; dims.len()])
    }

    pub fn new(dims: &[usize], extents: &[f64], periodic: &[bool]) -> Self {
        assert_eq!(dims.len(), extents.len());
        assert_eq!(dims.len(), periodic.len());
        assert!(!dims.is_empty(), "grid needs at least one axis");
        assert!(dims.iter().all(|&d| d >= 1), "every axis needs a node");
        assert!(extents.iter().all(|&p| p > 0.0), "axis extents must be positive");
        let mut strides = vec![0usize; dims.len()];
        let mut acc = 1usize;
        for i in (0..dims.len()).rev() {
            strides[i] = acc;
            acc *= dims[i];
        }
        Grid {
            dims: dims.to_vec(),
            extents: extents.to_vec(),
            periodic: periodic.to_vec(),
            strides,
            len: acc,
        }
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn extents(&self) -> &[f64] {
        &self.extents
    }

    pub fn is_periodic(&self, axis: usize) -> bool {
        self.periodic[axis]
    }

    pub fn fully_periodic(&self) -> bool {
        self.periodic.iter().all(|&p| p)
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        if self.periodic[axis] {
            self.extents[axis] / self.dims[axis] as f64
        } else if self.dims[axis] > 1 {
            self.extents[axis] / (self.dims[axis] - 1) as f64
        } else {
            self.extents[axis]
        }
    }

    pub fn multi(&self, node: usize) -> Vec<usize> {
        let mut m = Vec::with_capacity(self.ndim());
        let mut rem = node;
        for i in 0..self.ndim() {
            m.push(rem / self.strides[i]);
            rem %= self.strides[i];
        }
        m
    }

    pub fn index(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.strides)
            .map(|(&m, &s)| m * s)
            .sum()
    }

    pub fn coord(&self, node: usize, axis: usize) -> f64 {
        let m = (node / self.strides[axis]) % self.dims[axis];
        m as f64 * self.spacing(axis)
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        (0..self.ndim()).map(|a| self.coord(node, a)).collect()
    }

    /// Steps `node` by `offset[i]` cells on each axis; `None` when a bounded
    /// axis is exceeded.
    pub fn step(&self, node: usize, offset: &[isize]) -> Option<usize> {
        let mut idx = 0usize;
        let mut rem = node;
        for i in 0..self.ndim() {
            let m = (rem / self.strides[i]) as isize % self.dims[i] as isize + offset[i];
            rem %= self.strides[i];
            let d = self.dims[i] as isize;
            let m = if self.periodic[i] {
                m.rem_euclid(d)
            } else if (0..d).contains(&m) {
                m
            } else {
                return None;
            };
            idx += m as usize * self.strides[i];
        }
        Some(idx)
    }

    /// Quadrature weight of the cell around `node` (trapezoid halving at
    /// bounded-axis endpoints so that weights sum to the box volume).
    pub fn cell_weight(&self, node: usize) -> f64 {
        let mut w = 1.0;
        for i in 0..self.ndim() {
            let h = self.spacing(i);
            if self.periodic[i] {
                w *= h;
            } else {
                let m = (node / self.strides[i]) % self.dims[i];
                let end = m == 0 || m == self.dims[i] - 1;
                w *= if end && self.dims[i] > 1 { 0.5 * h } else { h };
            }
        }
        w
    }

    pub fn volume(&self) -> f64 {
        self.extents.iter().product()
    }

    /// Physical wavenumber of FFT bin `k` on a periodic axis. Bins above
    /// half the axis length alias to negative frequencies; the exact half
    /// bin keeps the positive sign (sections are complex, no reality
    /// constraint forces a symmetric choice).
    pub fn wavenumber(&self, axis: usize, k: usize) -> f64 {
        debug_assert!(self.periodic[axis]);
        let n = self.dims[axis];
        let signed = if 2 * k <= n { k as isize } else { k as isize - n as isize };
        core::f64::consts::TAU * signed as f64 / self.extents[axis]
    }

    /// Shortest signed coordinate offset from `a` to `b` along `axis`.
    pub fn axis_offset(&self, a: usize, b: usize, axis: usize) -> f64 {
        let mut d = self.coord(b, axis) - self.coord(a, axis);
        if self.periodic[axis] {
            let p = self.extents[axis];
            if d > 0.5 * p {
                d -= p;
            } else if d < -0.5 * p {
                d += p;
            }
        }
        d
    }

    /// Euclidean chart distance respecting periodic wrap.
    pub fn chart_distance(&self, a: usize, b: usize) -> f64 {
        (0..self.ndim())
            .map(|ax| {
                let d = self.axis_offset(a, b, ax);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn nodes(&self) -> impl Iterator<Item = usize> {
        0..self.len
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn row_major_roundtrip_and_wrap() {
        let g = Grid::torus(&[4, 6], &[1.0, 3.0]);
        assert_eq!(g.len(), 24);
        for node in g.nodes() {
            assert_eq!(g.index(&g.multi(node)), node);
        }
        assert_eq!(g.step(0, &[-1, -1]), Some(g.index(&[3, 5])));
        assert_eq!(g.step(g.index(&[3, 5]), &[1, 1]), Some(0));
    }

    #[test]
    fn bounded_axis_rejects_overstep() {
        let g = Grid::new(&[4, 5], &[1.0, 2.0], &[true, false]);
        assert_eq!(g.step(g.index(&[0, 4]), &[0, 1]), None);
        assert_eq!(g.step(g.index(&[0, 4]), &[0, -1]), Some(g.index(&[0, 3])));
        assert_relative_eq!(g.spacing(1), 0.5);
    }

    #[test]
    fn weights_sum_to_volume() {
        let torus = Grid::torus(&[8, 8], &[2.0, 5.0]);
        let s: f64 = torus.nodes().map(|n| torus.cell_weight(n)).sum();
        assert_relative_eq!(s, 10.0, max_relative = 1e-12);

        let cyl = Grid::new(&[8, 9], &[2.0, 4.0], &[true, false]);
        let s: f64 = cyl.nodes().map(|n| cyl.cell_weight(n)).sum();
        assert_relative_eq!(s, 8.0, max_relative = 1e-12);
    }

    #[test]
    fn wavenumbers_alias_symmetrically() {
        let g = Grid::torus(&[8], &[core::f64::consts::TAU]);
        assert_relative_eq!(g.wavenumber(0, 1), 1.0);
        assert_relative_eq!(g.wavenumber(0, 7), -1.0);
        assert_relative_eq!(g.wavenumber(0, 4), 4.0);
    }

    #[test]
    fn chart_distance_wraps() {
        let g = Grid::torus(&[8, 8], &[8.0, 8.0]);
        let a = g.index(&[0, 0]);
        let b = g.index(&[7, 0]);
        assert_relative_eq!(g.chart_distance(a, b), 1.0, max_relative = 1e-12);
    }
}
